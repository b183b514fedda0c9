use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frame::encode_body;
use crate::registry::{EntityKind, ProducerKind, RegistryState, Replicas};
use crate::runner::LaunchSpec;
use crate::statestore::StateStore;
use crate::value::Document;

/// One sensor, stream or gadget as the scheduler wants it to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesiredWorkload {
    /// `sensor/<name>`, `stream/<name>` or `gadget/<name>`.
    pub workload: String,
    pub replicas: u32,
    pub pin: Option<String>,
    /// Launch parameters shared by every replica; `instance_id` is empty.
    pub template: LaunchSpec,
}

/// Hash of everything that, when changed, requires restarting instances.
pub fn fingerprint(spec: &LaunchSpec) -> String {
    let mut stripped = spec.clone();
    stripped.instance_id.clear();
    stripped.fingerprint.clear();
    let digest = Sha256::digest(encode_body(&stripped));
    hex::encode(&digest[..8])
}

#[allow(clippy::too_many_arguments)]
fn template(
    workload: String,
    entity: &str,
    version: u64,
    executable: &str,
    config: &Document,
    inputs: &[String],
    output: Option<&str>,
    databases: Vec<String>,
) -> LaunchSpec {
    let mut spec = LaunchSpec {
        instance_id: String::new(),
        group: workload.clone(),
        workload,
        entity: entity.to_string(),
        version,
        executable: executable.to_string(),
        config: config.clone(),
        inputs: inputs.to_vec(),
        output: output.map(str::to_string),
        databases,
        fingerprint: String::new(),
    };
    spec.fingerprint = fingerprint(&spec);
    spec
}

/// Derives the desired workloads from registry contents. `auto_targets` gives
/// the current autoscaler target of auto-replicated streams (default 1).
pub fn desired_state(
    state: &RegistryState,
    auto_targets: &BTreeMap<String, u32>,
    store: Option<&StateStore>,
) -> BTreeMap<String, DesiredWorkload> {
    let databases = |owners: &[&str]| store.map(|s| s.owned_by(owners)).unwrap_or_default();
    let mut out = BTreeMap::new();

    for sensor in state.sensors().values() {
        let Some(driver) = state.entity(EntityKind::Driver, &sensor.driver) else {
            continue;
        };
        let workload = format!("sensor/{}", sensor.name);
        let spec = template(
            workload.clone(),
            &driver.name,
            driver.version,
            &driver.executable,
            &sensor.config,
            &[],
            Some(&sensor.name),
            databases(&[&sensor.name, &driver.name]),
        );
        out.insert(
            workload.clone(),
            DesiredWorkload {
                workload,
                replicas: 1,
                pin: sensor.node_pin.clone(),
                template: spec,
            },
        );
    }

    for stream in state.streams().values() {
        if stream.producer_kind != ProducerKind::AnalyticsUnit {
            continue;
        }
        let Some(au) = state.entity(EntityKind::AnalyticsUnit, &stream.producer) else {
            continue;
        };
        let replicas = match stream.replicas {
            Replicas::Fixed(n) => n,
            Replicas::Auto => auto_targets.get(&stream.name).copied().unwrap_or(1),
        };
        let workload = format!("stream/{}", stream.name);
        let spec = template(
            workload.clone(),
            &au.name,
            au.version,
            &au.executable,
            &stream.au_config,
            &stream.inputs,
            Some(&stream.name),
            databases(&[&stream.name, &au.name]),
        );
        out.insert(
            workload.clone(),
            DesiredWorkload {
                workload,
                replicas,
                pin: None,
                template: spec,
            },
        );
    }

    for gadget in state.gadgets().values() {
        let Some(actuator) = state.entity(EntityKind::Actuator, &gadget.actuator) else {
            continue;
        };
        let workload = format!("gadget/{}", gadget.name);
        let spec = template(
            workload.clone(),
            &actuator.name,
            actuator.version,
            &actuator.executable,
            &gadget.config,
            &gadget.inputs,
            None,
            databases(&[&gadget.name, &actuator.name]),
        );
        out.insert(
            workload.clone(),
            DesiredWorkload {
                workload,
                replicas: 1,
                pin: gadget.node_pin.clone(),
                template: spec,
            },
        );
    }
    out
}
