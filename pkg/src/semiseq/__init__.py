"""Semi-supervised attentional seq2seq with three training routes
(supervised, denoising auto-encoder, LM-reward REINFORCE), built on a small
numpy autodiff engine."""

__version__ = "0.1.0"
