use std::time::Duration;

use crate::broker::{AccessToken, Broker, BrokerError, Message, Subscription, SubscriptionStats};
use crate::value::Document;

/// The message-bus operations a runner needs.
pub trait Bus: Send + Sync + 'static {
    fn issue_token(
        &self,
        instance_id: &str,
        publish: Option<&str>,
        subscribe: &[String],
    ) -> Result<AccessToken, BrokerError>;
    fn revoke_token(&self, instance_id: &str);
    fn publish(&self, token: &AccessToken, subject: &str, payload: Document) -> Result<u64, BrokerError>;
    fn subscribe(
        &self,
        token: &AccessToken,
        subject: &str,
        group: &str,
    ) -> Result<Box<dyn BusSubscription>, BrokerError>;
}

pub trait BusSubscription: Send + Sync {
    fn next_message(&self, timeout: Duration) -> Result<Option<Message>, BrokerError>;
    fn stats(&self) -> SubscriptionStats;
}

impl Bus for Broker {
    fn issue_token(
        &self,
        instance_id: &str,
        publish: Option<&str>,
        subscribe: &[String],
    ) -> Result<AccessToken, BrokerError> {
        Broker::issue_token(self, instance_id, publish, subscribe)
    }

    fn revoke_token(&self, instance_id: &str) {
        Broker::revoke_token(self, instance_id)
    }

    fn publish(&self, token: &AccessToken, subject: &str, payload: Document) -> Result<u64, BrokerError> {
        Broker::publish(self, token, subject, payload)
    }

    fn subscribe(
        &self,
        token: &AccessToken,
        subject: &str,
        group: &str,
    ) -> Result<Box<dyn BusSubscription>, BrokerError> {
        Ok(Box::new(Broker::subscribe(self, token, subject, group)?))
    }
}

impl BusSubscription for Subscription {
    fn next_message(&self, timeout: Duration) -> Result<Option<Message>, BrokerError> {
        Subscription::next_message(self, timeout)
    }

    fn stats(&self) -> SubscriptionStats {
        Subscription::stats(self)
    }
}
