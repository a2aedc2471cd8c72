"""Export torchvision model features, heads, and annotations as semcf bundles."""

from .config import ExportConfig, ImageManifest
from .confusion import confusion_from_predictions, predict_classes
from .models import build_aux_trunk, build_split, numpy_head_forward
from .pipeline import export_bundle
from .writer import write_bundle

__version__ = "0.1.0"
