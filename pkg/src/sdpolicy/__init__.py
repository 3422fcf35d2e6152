"""Spiking diffusion policy: LIF neurons with learnable channel-wise thresholds
inside a DDPM action denoiser, plus a toy push environment, an energy
estimator and a small training CLI."""

__version__ = "0.1.0"
