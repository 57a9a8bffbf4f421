"""Minimal numpy layer engine with exact backpropagation and Adam."""

from .genome import BOUNDS, Genome, GenomeError, LayerSpec, block, minimal_genome
from .model import TOTAL_STRIDE, ShapeError, UNet
from .optim import AdamState, OptimizerError, adam_step, mse
from .train import TrainingDiverged, TrainResult, denoise, fixed_window_frames, predict_mask, train_denoiser


def build_from_genome(genome: Genome, seed: int = 0, dtype="float64", zero_final: bool = False) -> UNet:
    return UNet(genome, seed=seed, dtype=dtype, zero_final=zero_final)


def forward(model, x):
    return model.forward(x)


def backward(model, x, target_mask, weight=None):
    """Gradients of the mean squared mask error for every parameter, as (name, array) pairs."""
    pred = model.forward(x)
    loss, g = mse(pred, target_mask, weight)
    model.zero_grad()
    model.backward(g)
    names = [n for n, _ in model.parameters()]
    return loss, list(zip(names, model.gradients()))
