"""Dense f64 tensors with a small reverse-mode autodiff tape."""

from . import ops
from .ops import cross_entropy_last_token, forward_op
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import AdamW
from .rng import stream
from .tape import Gradients, ShapeError, Tape, Tensor

__all__ = [
    "AdamW",
    "Gradients",
    "ShapeError",
    "Tape",
    "Tensor",
    "check_gradients",
    "cross_entropy_last_token",
    "forward_op",
    "numeric_grad",
    "ops",
    "relative_error",
    "stream",
]
