"""Parser-free virtual try-on with regional-mask guided feature fusion, at desk scale."""
from .atelier import generate_dataset, oracle_teacher, render_cloth, render_person
from .generator import RMGenerator, generate
from .tensors import ImageTensor, LossWeights, RegionalMask, WarpedCloth, load_image, save_image
from .training import TrainConfig, infer, load_checkpoint, train
from .warp import FlowEstimator, predict_flow, warp

__version__ = "0.1.0"
