"""Multi-exposure HDR restoration with progressive neural texture transfer.

The package is organized along the processing pipeline:

* :mod:`hdrfuse.imaging`    radiance-domain pixel math and the fusion baseline
* :mod:`hdrfuse.rgbe`       Radiance RGBE (.hdr) codec
* :mod:`hdrfuse.dataset`    scene ingestion, manifests, patches, translation
* :mod:`hdrfuse.synthetic`  synthetic bracketed scenes with exact ground truth
* :mod:`hdrfuse.features`   multi-scale matching features (backbone + handcrafted)
* :mod:`hdrfuse.matching`   progressive patch correspondence and feature swapping
* :mod:`hdrfuse.network`    learnable blocks and the two-stream forward pass
* :mod:`hdrfuse.training`   tone-mapped L1 objective, loop, checkpoints, audit
* :mod:`hdrfuse.evaluation` PSNR/SSIM metrics and evaluation protocols
* :mod:`hdrfuse.cli`        command-line entry points
"""

from .imaging import (
    DomainParams,
    RadianceMap,
    exposure_ratios,
    ms_hdr_transform,
    mu_law,
    saturation_mask,
    to_radiance,
    weighted_fusion,
)
from .matching import MatchField, WindowSpec, brute_force_match, progressive_match
from .network import FusionNet, ModelInputs, NetConfig, init_params, tiny_config
from .training import TrainConfig, gradient_audit, loss, train_loop
from .evaluation import MetricsReport, psnr_linear, psnr_mu, ssim

__version__ = "0.1.0"
