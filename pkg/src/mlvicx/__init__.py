"""Self-supervised multi-level variance-covariance pretraining for
grayscale images, with a from-scratch autodiff engine, probing, and
diagnostics."""

from .augment import AugmentPolicy, ViewPair, make_views
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, PhantomSpec, generate_phantoms, load_pgm_dir, split, subset
from .evaluate import EvalReport, ProbeConfig, ablation_suite, auc, linear_probe, paired_t_test
from .losses import LossBreakdown, VicWeights, cov_loss, cov_matrix, inv_loss, mlvicx_loss, var_loss
from .model import EncoderConfig, ForwardRecord, MLVICXModel
from .optim import LarsOptimizer, SgdOptimizer
from .tensor import Tensor, grad_check, set_debug
from .train import MetricsRecord, PretrainResult, collapse_report, pretrain

__version__ = "0.1.0"
