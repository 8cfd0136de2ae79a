"""Per-token generative heads."""

from fastar_lab.heads.cvae import CvaeHead, cvae_loss, cvae_sample
from fastar_lab.heads.shortcut import CallCounter, ShortcutHead, euler_sample, total_loss

__all__ = ["CallCounter", "CvaeHead", "ShortcutHead", "cvae_loss", "cvae_sample", "euler_sample", "total_loss"]
