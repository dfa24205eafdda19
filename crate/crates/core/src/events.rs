//! Domain events: the only way service state changes.

use serde::{Deserialize, Serialize};

use crate::ids::SystemId;
use crate::management::ManagementEvent;
use crate::plugins::PluginDescriptor;
use crate::registry::{DeletionDirective, RegistryEntity};
use crate::workflow::WorkflowEvent;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegistryEvent {
    Registered { entity: RegistryEntity },
    DirectiveUpdated { system_id: SystemId, directive: DeletionDirective, version: u64 },
    ActivationChanged { system_id: SystemId, active: bool, version: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PluginEvent {
    Published { descriptor: PluginDescriptor },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "module", content = "event", rename_all = "snake_case")]
pub enum DomainEvent {
    Registry(RegistryEvent),
    Plugins(PluginEvent),
    Workflow(WorkflowEvent),
    Management(ManagementEvent),
}
