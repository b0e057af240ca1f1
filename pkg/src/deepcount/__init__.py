"""DeepCount: a crowd-counting laboratory with a from-scratch autograd core.

Submodules:

- ``tensor``      reverse-mode autograd over NHWC arrays
- ``density``     Gaussian head splatting, density pyramids, pixelation SNR
- ``network``     backbone, transposed-conv branches, detach
- ``trainer``     multi-task loss, SGD with momentum, ablation protocol
- ``analysis``    FLOPs and parameter audit
- ``evaluation``  tiled inference, MAE/RMSE, display upsampling
- ``formats``     DCDM/DCWT binaries and key=value configs
- ``synthetic``   synthetic scenes and dataset I/O
- ``cli``         the ``deepcount`` command
"""

from ._kernels import BACKEND
from .network import NetworkSpec, build
from .trainer import TrainConfig

__version__ = "0.1.0"
__all__ = ["BACKEND", "NetworkSpec", "TrainConfig", "build", "__version__"]
