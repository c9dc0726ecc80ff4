"""Set multimodal variational autoencoder on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import ConfigError, EmptySubsetError, FormatError, NumericError, PairingError, ShapeError, SmvaeError
from .modality import ModalityBatch, ModalitySpec
from .model import SmvaeModel, cross_modal_generate, subset_elbo, training_loss, training_step
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MultimodalDataset, load_dataset, save_dataset
from .evaluation import estimate_ctc, estimate_log_likelihoods, log_mean_exp
