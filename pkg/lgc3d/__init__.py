from .checker import check_engine
from .compiler import CompiledNetwork
from .compiler import FrozenNetwork
from .compiler import bench
from .compiler import compile_network
from .compiler import run_compiled
from .compiler import run_frozen
from .densenet import LGCNet
from .densenet import ModelConfig
from .densenet import build_model
from .densenet import count_madds
from .densenet import count_params
from .densenet import predefined_configs
from .hsi import HsiCube
from .hsi import SampleSplit
from .hsi import load_cube
from .hsi import save_cube
from .hsi import stratified_split
from .hsi import synth_cube
from .lgc import GroupedConv3d
from .lgc import LgcConv3d
from .lgc import freeze
from .metrics import MetricsReport
from .tensor import Tensor
from .training import TrainConfig
from .training import evaluate
from .training import train
from .utils import CheckConfig
from .utils import CheckResult
from .utils import LGCError
from .utils import Status

__all__ = [
    "check_engine",
    "Status",
    "CheckResult",
    "CheckConfig",
    "LGCError",
    "Tensor",
    "LgcConv3d",
    "GroupedConv3d",
    "freeze",
    "FrozenNetwork",
    "CompiledNetwork",
    "compile_network",
    "run_frozen",
    "run_compiled",
    "bench",
    "ModelConfig",
    "LGCNet",
    "build_model",
    "predefined_configs",
    "count_params",
    "count_madds",
    "HsiCube",
    "SampleSplit",
    "load_cube",
    "save_cube",
    "stratified_split",
    "synth_cube",
    "TrainConfig",
    "train",
    "evaluate",
    "MetricsReport",
]
