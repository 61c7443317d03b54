from services.model.bundle import DisentangledTriple, ModelBundle
from services.model.checkpoint import load_checkpoint, read_metadata, save_checkpoint
from services.model.networks import grad_reverse, grl_backward

__all__ = [
    "DisentangledTriple",
    "ModelBundle",
    "grad_reverse",
    "grl_backward",
    "load_checkpoint",
    "read_metadata",
    "save_checkpoint",
]
