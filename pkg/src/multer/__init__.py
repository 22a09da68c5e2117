"""Multi-level texture encoding network with a numpy reverse-mode autodiff engine."""

from .autodiff import ContractError, NonFiniteError, Tensor
from .encoding import Codebook, aggregate, assign, encode
from .lem import LEM, LemConfig, bilinear_combine, lem_forward
from .network import BackboneConfig, MulterConfig, MulterNet, backbone_forward, multer_forward, predict
from .training import RunReport, Schedule, cross_validate, evaluate, lr_at, sgd_step, train

__version__ = "0.1.0"
