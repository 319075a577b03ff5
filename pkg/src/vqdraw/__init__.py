"""Sequential discrete auto-encoder built on a small numpy autodiff engine."""
from .codec import LatentCode, decode, encode, read_code_file, sample, write_code_file
from .data import MixtureSpec, gen_mixture, load_idx, write_image_grid
from .refiner import RefinerConfig, build_refiner
from .training import TrainConfig, batch_entropy, fit, load_checkpoint, loss_total, save_checkpoint, train_step

__all__ = [
    "LatentCode", "decode", "encode", "read_code_file", "sample", "write_code_file",
    "MixtureSpec", "gen_mixture", "load_idx", "write_image_grid",
    "RefinerConfig", "build_refiner",
    "TrainConfig", "batch_entropy", "fit", "load_checkpoint", "loss_total", "save_checkpoint", "train_step",
]
