"""White-box attacks over a model-agnostic gradient oracle."""

from .bb import BbConfig, bb_l0, bb_l0_batch
from .cw import CwConfig, cw_l2, cw_l2_batch
from .nelder_mead import nelder_mead
from .oracle import (AttackRecord, GradientOracle, adv_criterion, boundary_normal, linear_oracle, make_record,
                     make_records, network_oracle, perturbation_norms, runner_up)
from .pgd import PgdConfig, pgd_linf, pgd_linf_batch
from .starts import sample_starting_point, sample_starting_points

__all__ = [
    "AttackRecord", "BbConfig", "CwConfig", "GradientOracle", "PgdConfig", "adv_criterion", "bb_l0", "bb_l0_batch",
    "boundary_normal", "cw_l2", "cw_l2_batch", "linear_oracle", "make_record", "make_records", "nelder_mead",
    "network_oracle", "perturbation_norms", "pgd_linf", "pgd_linf_batch", "runner_up", "sample_starting_point",
    "sample_starting_points",
]
