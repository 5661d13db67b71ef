"""Cross-domain conditional GAN for stereo-consistent image translation."""
from .data import AugmentConfig, DomainDataset, StereoPair, load_dataset, synth_generate
from .evaluation import EvalConfig, block_match_disparity, compare_models, stereo_consistency_error
from .model import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
from .trainer import TrainingConfig, TrainState, run_curriculum, translate

__version__ = "0.1.0"
