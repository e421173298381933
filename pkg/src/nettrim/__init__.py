"""Network trimming: prune neurons with a high Average Percentage of Zeros."""

from .apoz import ApozAccumulator, ApozReport, layer_summary, measure_apoz
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SplitSpec, batches, load_idx, load_mnist, split_stat_set
from .nn import (LayerSpec, Network, TrainConfig, backward, evaluate, forward, init_network,
                 param_count, sgd_step, train)
from .pipeline import LoopConfig, ablation_report, emit_reports, run_loop
from .presets import lenet
from .surgery import TrimPlan, TrimPolicy, compression_rate, masked_forward, prune, select_neurons

__version__ = "0.1.0"
