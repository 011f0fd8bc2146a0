"""Prediction of new-onset atrial fibrillation from 12-lead ECG and tabular features.

Everything runs on numpy: a small reverse-mode autodiff engine, dilated
convolutional and dense networks, Butterworth band-pass filtering, split and
augmentation logic, ablation harnesses and a synthetic data generator.
"""

__version__ = "0.1.0"
