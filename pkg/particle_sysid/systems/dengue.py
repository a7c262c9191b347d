"""
Vector-borne epidemic (dengue) model with counted compartments.

Humans move through S -> E -> I -> R and mosquitoes through the same four
compartments; infection crosses between the two populations through bites.
The state also carries the newly-infectious humans accumulated since the
last report (z) and the per-step transition counts, which makes the
parameter conditionals beta-binomial:

    tau_h ~ Bin(S_h, 1 - exp(-I_m / n_h))    bitten humans
    e_h   ~ Bin(tau_h, lambda_h)             newly exposed humans
    i_h   ~ Bin(E_h, delta_h)                newly infectious humans
    r_h   ~ Bin(I_h, gamma_h)                recoveries
    (mosquitoes analogously with tau_m ~ Bin(S_m, 1 - exp(-I_h / n_h)))
    y_t   ~ Bin(z_t, rho)                    reported cases

The transition density is a sum over hidden counts and is not evaluated:
the model supports simulation and Gibbs conditionals only.

Inputs carry one column, the reset flag: 1 when the previous step was
reported, which clears the accumulator before the step's new cases are
added.
"""

from dataclasses import asdict, dataclass, fields
from typing import Dict, Tuple

import numpy as np
from scipy import stats

from ..core import Beta, ParameterVector, PointMass, Prior, mode_matched_beta
from ..errors import CapabilityError, InputError
from .base import StateSpaceModel

PARAM_NAMES = ("lambda_h", "delta_h", "gamma_h", "lambda_m", "delta_m", "gamma_m", "rho")
POPULATION = 7370

# Mean durations (days) the default priors are mode-matched to
MEAN_INCUBATION_HUMAN = 4.4
MEAN_INFECTIOUS_HUMAN = 4.5
MEAN_INCUBATION_MOSQUITO = 6.5


@dataclass(frozen=True)
class SeirState:
    """One row of the counted state, by compartment (field order is the state layout)."""
    S_h: int
    E_h: int
    I_h: int
    R_h: int
    S_m: int
    E_m: int
    I_m: int
    R_m: int
    z: int
    tau_h: int = 0
    tau_m: int = 0
    e_h: int = 0
    i_h: int = 0
    r_h: int = 0
    e_m: int = 0
    i_m: int = 0

    @classmethod
    def from_array(cls, x) -> "SeirState":
        return cls(*(int(v) for v in np.asarray(x).reshape(len(fields(cls)))))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.int64)

    @property
    def humans(self) -> int:
        return self.S_h + self.E_h + self.I_h + self.R_h

    @property
    def mosquitoes(self) -> int:
        return self.S_m + self.E_m + self.I_m + self.R_m


@dataclass(frozen=True)
class SeirParams:
    """Per-step transition probabilities and the reporting rate."""
    lambda_h: float
    delta_h: float
    gamma_h: float
    lambda_m: float
    delta_m: float
    gamma_m: float
    rho: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise InputError("Dengue probabilities must lie in [0, 1]", parameter=name, value=value)

    @classmethod
    def from_theta(cls, theta: ParameterVector) -> "SeirParams":
        return cls(**{name: theta[name] for name in PARAM_NAMES})


# state layout
SH, EH, IH, RH, SM, EM, IM, RM, Z, TAU_H, TAU_M, NEW_EH, NEW_IH, NEW_RH, NEW_EM, NEW_IM = range(16)
STATE_LABELS = tuple(f.name for f in fields(SeirState))


def weekly_reset_inputs(T: int, period: int = 7, offset: int = 0) -> np.ndarray:
    """Reset-flag inputs for a report every ``period`` steps starting at ``offset``."""
    if T <= 0:
        raise InputError("Reset inputs need at least one step", T=T)
    observed = np.zeros(T, dtype=bool)
    observed[offset::period] = True
    observed[-1] = True
    flags = np.zeros((T, 1))
    flags[1:, 0] = observed[:-1]
    return flags


class DengueModel(StateSpaceModel):
    """SEIR humans and SEIR mosquitoes coupled through bites; binomial under-reporting."""

    name = "dengue"
    state_dim = 16
    obs_dim = 1
    state_dtype = np.int64
    state_labels = STATE_LABELS
    param_names = PARAM_NAMES
    features = frozenset({"parameter_conditional"})

    def __init__(self, population: int = POPULATION, exposed_mean: float = 5.0, infectious_mean: float = 5.0,
                 mosquito_log10_range: Tuple[float, float] = (-1.0, 2.0), count_initial_infectious: bool = True,
                 **options):
        """
        Args:
            population: Human population size n_h
            exposed_mean: Poisson mean of the initially exposed humans
            infectious_mean: Poisson mean of the initially infectious humans beyond the first
            mosquito_log10_range: Initial susceptible mosquitoes are 10**u * n_h with u uniform on this range
            count_initial_infectious: Start the report accumulator z at the initial I_h rather than 0
        """
        super().__init__(population=population, exposed_mean=exposed_mean, infectious_mean=infectious_mean,
                         mosquito_log10_range=list(mosquito_log10_range),
                         count_initial_infectious=count_initial_infectious, **options)
        if population <= 0:
            raise InputError("Population must be positive", population=population)
        self.population = int(population)
        self.exposed_mean = float(exposed_mean)
        self.infectious_mean = float(infectious_mean)
        self.mosquito_log10_range = tuple(float(v) for v in mosquito_log10_range)
        self.count_initial_infectious = bool(count_initial_infectious)

    # -- parameters ---------------------------------------------------

    def default_parameters(self) -> Dict[str, float]:
        return {
            "lambda_h": 0.5,
            "delta_h": 1.0 / MEAN_INCUBATION_HUMAN,
            "gamma_h": 1.0 / MEAN_INFECTIOUS_HUMAN,
            "lambda_m": 0.5,
            "delta_m": 1.0 / MEAN_INCUBATION_MOSQUITO,
            "gamma_m": 0.0,
            "rho": 0.3,
        }

    def parameter_bounds(self) -> Dict[str, Tuple[float, float]]:
        return {name: (0.0, 1.0) for name in PARAM_NAMES}

    def default_prior(self) -> Prior:
        return Prior({
            "lambda_h": Beta(1.0, 1.0),
            "delta_h": Beta(*mode_matched_beta(MEAN_INCUBATION_HUMAN)),
            "gamma_h": Beta(*mode_matched_beta(MEAN_INFECTIOUS_HUMAN)),
            "lambda_m": Beta(1.0, 1.0),
            "delta_m": Beta(*mode_matched_beta(MEAN_INCUBATION_MOSQUITO)),
            "gamma_m": PointMass(0.0),
            "rho": Beta(1.0, 1.0),
        })

    # -- dynamics -----------------------------------------------------

    def sample_initial(self, theta, n, rng, data=None):
        x = np.zeros((n, 16), dtype=np.int64)
        x[:, EH] = rng.poisson(self.exposed_mean, size=n)
        x[:, IH] = 1 + rng.poisson(self.infectious_mean, size=n)
        room = np.maximum(self.population - x[:, EH] - x[:, IH], 0)
        x[:, RH] = np.floor(rng.random(n) * (room + 1)).astype(np.int64)
        x[:, SH] = self.population - x[:, EH] - x[:, IH] - x[:, RH]
        lo, hi = self.mosquito_log10_range
        x[:, SM] = np.round(10.0 ** rng.uniform(lo, hi, size=n) * self.population).astype(np.int64)
        # modelling choice: the first report includes the initially infectious humans;
        # count_initial_infectious=False starts the accumulator at zero instead
        if self.count_initial_infectious:
            x[:, Z] = x[:, IH]
        return x

    def sample_transition(self, x_prev, u, t, theta, rng):
        x_prev = np.asarray(x_prev, dtype=np.int64)
        u = np.asarray(u, dtype=float)
        if u.size == 0:
            raise InputError("Dengue transitions need the reset-flag input", step=t)
        p = SeirParams.from_theta(theta)
        n_h = float(self.population)
        x = np.zeros_like(x_prev)
        bite_h = 1.0 - np.exp(-x_prev[:, IM] / n_h)
        bite_m = 1.0 - np.exp(-x_prev[:, IH] / n_h)
        tau_h = rng.binomial(x_prev[:, SH], bite_h)
        tau_m = rng.binomial(x_prev[:, SM], bite_m)
        e_h = rng.binomial(tau_h, p.lambda_h)
        i_h = rng.binomial(x_prev[:, EH], p.delta_h)
        r_h = rng.binomial(x_prev[:, IH], p.gamma_h)
        e_m = rng.binomial(tau_m, p.lambda_m)
        i_m = rng.binomial(x_prev[:, EM], p.delta_m)
        r_m = rng.binomial(x_prev[:, IM], p.gamma_m)

        x[:, SH] = x_prev[:, SH] - e_h
        x[:, EH] = x_prev[:, EH] + e_h - i_h
        x[:, IH] = x_prev[:, IH] + i_h - r_h
        x[:, RH] = x_prev[:, RH] + r_h
        x[:, SM] = x_prev[:, SM] - e_m
        x[:, EM] = x_prev[:, EM] + e_m - i_m
        x[:, IM] = x_prev[:, IM] + i_m - r_m
        x[:, RM] = x_prev[:, RM] + r_m
        carried = 0 if u[0] == 1 else x_prev[:, Z]
        x[:, Z] = carried + i_h
        x[:, TAU_H], x[:, TAU_M] = tau_h, tau_m
        x[:, NEW_EH], x[:, NEW_IH], x[:, NEW_RH] = e_h, i_h, r_h
        x[:, NEW_EM], x[:, NEW_IM] = e_m, i_m
        return x

    def observation_logpdf(self, y, x, u, t, theta):
        cases = float(np.asarray(y)[0])
        z = np.asarray(x)[:, Z]
        return stats.binom.logpmf(cases, z, theta["rho"])

    def sample_observation(self, x, u, t, theta, rng):
        return rng.binomial(np.asarray(x)[:, Z], theta["rho"]).reshape(-1, 1).astype(float)

    def observation_schedule(self, inputs: np.ndarray) -> np.ndarray:
        """A step is reported when the next step's reset flag is set; the last step always is."""
        inputs = np.asarray(inputs)
        T = inputs.shape[0]
        observed = np.ones(T, dtype=bool)
        if inputs.shape[1] > 0 and T > 1:
            observed[:-1] = inputs[1:, 0] == 1
        return observed

    def simulate(self, theta, T, rng, inputs=None):
        if inputs is None:
            inputs = weekly_reset_inputs(T)
        return super().simulate(theta, T, rng, inputs)

    # -- Gibbs conditional --------------------------------------------

    def beta_binomial_counts(self, path, data) -> Dict[str, Tuple[float, float]]:
        """(successes, trials) for every parameter along one trajectory."""
        path = np.asarray(path, dtype=np.int64)
        prev, cur = path[:-1], path[1:]
        observed = data.observed_mask
        y = data.observations[observed, 0]
        return {
            "lambda_h": (cur[:, NEW_EH].sum(), cur[:, TAU_H].sum()),
            "delta_h": (cur[:, NEW_IH].sum(), prev[:, EH].sum()),
            "gamma_h": (cur[:, NEW_RH].sum(), prev[:, IH].sum()),
            "lambda_m": (cur[:, NEW_EM].sum(), cur[:, TAU_M].sum()),
            "delta_m": (cur[:, NEW_IM].sum(), prev[:, EM].sum()),
            "gamma_m": ((cur[:, RM] - prev[:, RM]).sum(), prev[:, IM].sum()),
            "rho": (float(y.sum()), float(path[observed, Z].sum())),
        }

    def parameter_conditional(self, path, data, theta: ParameterVector, prior, rng) -> ParameterVector:
        from ..learn_bayes import conjugate_beta_binomial_update

        counts = self.beta_binomial_counts(path, data)
        updates = {}
        for name in theta.free:
            dist = prior[name] if name in prior else None
            if isinstance(dist, PointMass):
                continue
            if not isinstance(dist, Beta):
                raise CapabilityError("Conjugate update needs a beta prior", parameter=name)
            successes, trials = counts[name]
            updates[name] = conjugate_beta_binomial_update(dist.alpha, dist.beta, successes, trials, rng)
        return theta.clipped(**updates) if updates else theta


def dengue_model(**options) -> DengueModel:
    """Registry factory; options as for DengueModel."""
    return DengueModel(**options)
