from .checkpoint import load_checkpoint, save_checkpoint
from .losses import DetectionLoss, detection_loss, forward_detection
from .model import DetectorConfig, ProposalSet, ToyDetector, select_proposals
from .roi import roi_align

__all__ = [
    "DetectionLoss", "DetectorConfig", "ProposalSet", "ToyDetector", "detection_loss",
    "forward_detection", "load_checkpoint", "roi_align", "save_checkpoint", "select_proposals",
]
