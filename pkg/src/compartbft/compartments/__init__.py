from .base import ALL, Compartment, Effects, PersistAck, RequestBatch, ViewChangeTrigger, to_client, to_replica
from .confirmation import Confirmation
from .execution import Execution
from .preparation import Preparation

__all__ = [
    "ALL", "Compartment", "Confirmation", "Effects", "Execution", "PersistAck", "Preparation",
    "RequestBatch", "ViewChangeTrigger", "to_client", "to_replica",
]
