"""Multi-task surgical scene understanding at desk scale: contrastive
class-incremental pretraining, LoG curriculum smoothing, caption and
scene-graph heads, and four multi-task optimisation regimes."""

__version__ = "0.1.0"
