"""Monte Carlo BSDE pricing with jumps under equivalent measures."""

from .bsde import (
    BsdeProblem,
    ContractionReport,
    SolverConfig,
    ValueSurface,
    deflated_price,
    paired_stderr,
    picard_contraction_report,
    price_under_P,
    solve_backward,
)
from .errors import *  # noqa: F401,F403
from .girsanov import (
    DensityPath,
    MeasureTilt,
    pure_jump_girsanov_kernel,
    stochastic_exponential,
    theta_kernel,
    tilt_brownian,
    tilt_compensator,
)
from .markets import (
    CollateralSpec,
    ContractSpec,
    MarketSpec,
    Quote,
    build_collateral_bsde,
    change_numeraire,
    exchange_option_numeraire_price,
    extract_hedge,
    gop_path,
    make_contract,
    market_tilt,
    price,
    pure_jump_market_price,
    real_world_price,
)
from .paths import (
    DiffusionSpec,
    JumpSpec,
    PathBundle,
    TimeGrid,
    brownian_terminal,
    build_grid,
    simulate_paths,
)

__version__ = "0.1.0"
