"""Super-replication pricing lab for binomial markets with transient impact."""

from .market import (
    MarketParams,
    PortfolioState,
    SteppedPath,
    StoppingGrid,
    cash_step,
    discretize_path,
    fundamental_path,
    liquidity_cost,
    spread_closed_form,
    spread_step,
    stopping_grid,
    terminal_wealth,
)
from .payoffs import ClaimPair, PayoffSpec, claims, evaluate_payoff, quadratic_claim, skorohod_distance_upper
from .pricing import (
    DPGrids,
    PriceResult,
    Strategy,
    affine_constrained_strategy,
    brute_force_cost,
    doob_quadratic_hedge,
    liquidation_preamble,
    superreplication_cost,
)
from .dual import (
    DualCertificate,
    MuWeights,
    VolProfile,
    constant_profile,
    dual_objective_temporary,
    dual_objective_transient,
    kusuoka_certificate,
    kusuoka_lower_bound,
    mu_weights,
)
from .limits import (
    HJBGrid,
    LimitProblem,
    bachelier_reference,
    f_of_z,
    hjb_value,
    limit_from_market,
    limit_value_mc,
)

__version__ = "0.1.0"
