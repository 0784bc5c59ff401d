from .chunking import BoundaryDecision, Router, chunk, ratio_loss, smooth_dechunk
from .config import ModelConfig, parse_layout, preset
from .hnet import ChunkStats, ForwardResult, HNet, build_model
from .layers import Segments
