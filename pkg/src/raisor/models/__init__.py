from raisor.models.base import Model
from raisor.models.conjugate import ConjugateNormalModel
from raisor.models.gp import GPModel, gp_predict
from raisor.models.vecchia import VecchiaStructure, build_vecchia, default_neighbors

__all__ = [
    "ConjugateNormalModel",
    "GPModel",
    "Model",
    "VecchiaStructure",
    "build_vecchia",
    "default_neighbors",
    "gp_predict",
]
