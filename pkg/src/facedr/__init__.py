"""Disentangled identity/expression models for 3D face meshes on deformation features."""
from .deform import DRFeature, ReferenceFrame, dr_decode, dr_encode
from .mesh import Mesh, load_obj, save_obj
from .network import ArchConfig, Model
from .synth import CorpusSpec, generate
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = ["DRFeature", "ReferenceFrame", "dr_decode", "dr_encode", "Mesh", "load_obj", "save_obj", "ArchConfig",
           "Model", "CorpusSpec", "generate", "TrainConfig", "load_model", "save_model", "train"]
