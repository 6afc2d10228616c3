"""Anomaly detection by negative learning.

An adversarial autoencoder is trained to reconstruct normal data while a
small labeled set of abnormal data is trained with the opposite objective,
so the model's reconstruction capability is limited to the normal
distribution. Anomaly scores are per-sample reconstruction errors,
evaluated by ROC/AUC.
"""

__version__ = "0.1.0"
