"""Local kernel Fisher discriminant tissue classification for multi-contrast brain MRI.

Volumes are partitioned by a mutual-information driven binary space
partitioning, each subdomain is classified with a two-stage kernel Fisher
discriminant, and the overlapping subdomain labelings are fused by simulated
annealing. Quality is scored by masked SSIM against the input channels.
"""
from .errors import (ClassAbsent, ConfigError, DegenerateError, DimensionError, FormatError,
                     InfiniteCnr, IoError, KfdaSegError, SingularError, UnsupportedError,
                     ValidationError)
from .volume import (BG, CSF, GM, MWM, WM, Box, BrainMask, LabelVolume, MultiChannelVolume,
                     ScalarVolume, load_labels, load_mask, load_volume, normalize_channels,
                     read_nifti, save_volume, write_nifti)
from .phantom import PhantomSpec, degrade_labels, generate_phantom, low_contrast_spec
from .partition import PartitionParams, PartitionTree, Subdomain, partition_volume
from .kfda import KernelSpec, KfdaParams, train_discriminant, classify_subdomain
from .stitch import AnnealSchedule, EnergyParams, assemble_volume, sa_map_estimate
from .quality import QualityReport, SsimParams, dice, mssim, ssim_map
from .mixture import Gmm2, gmm2_em, myelin_threshold
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"
