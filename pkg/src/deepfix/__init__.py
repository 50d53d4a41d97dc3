"""Fixation prediction with location biased convolutions, in plain numpy."""
from .layers import LBCConv, euclidean_loss, make_location_bank
from .metrics import (FixationSet, auc_borji, auc_judd, auc_shuffled, cc, emd, evaluate_map, nss,
                      sim)
from .netdef import (DESK, FULL, NetworkConfig, WeightArchive, build_network, get_config,
                     init_weights, load_weights, save_weights)
from .train import OptimizerState, compute_mean_map, train

__version__ = "0.1.0"
