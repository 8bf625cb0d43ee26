"""
closed-form operation counts for token-routed and sectionalized MoE layers, the total cost
S(E) of a sectionalized layer, its derivatives and the optimal expert count.

every count is in multiply-accumulates. L is the number of tokens per expert, so the full
input holds E*L tokens of width d0. E is real here so S(E) can be differentiated; integer
results are reported by `optimize_experts`.
"""
from enum import Enum
from logging import Logger, getLogger
from math import ceil, log2, sqrt
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, confloat, conint, root_validator

from sectionalmoe.errors import ConfigError, DomainError
from sectionalmoe.models import Strict


logger: Logger = getLogger('sectionalmoe.cost')

INV_PHI: float = (sqrt(5) - 1) / 2
INV_PHI_SQUARED: float = (3 - sqrt(5)) / 2

E_LIMIT: int = 2 ** 20


class Convention(Enum) :
	consistent = 'consistent'
	paper_literal = 'paper_literal'


class ModelDims(Strict) :
	L: conint(ge=1)
	E: confloat(gt=0)
	d0: conint(ge=1)
	h_pre: conint(ge=1) = 1
	h_exp: conint(ge=1) = 1
	alpha: confloat(ge=0) = 0.0
	r: Optional[conint(ge=1)] = None
	convention: Convention = Convention.consistent

	def at(self: 'ModelDims', E: float) -> 'ModelDims' :
		if not E > 0 :
			raise DomainError(f'expert count must be positive, got {E}')

		return self.copy(update={ 'E': float(E) })

	@property
	def on_model(self: 'ModelDims') -> bool :
		return self.r is None or self.r == self.E * self.E


class CostBreakdown(BaseModel) :
	E: float
	convention: Convention
	a_trad: float
	r_trad: float
	a_pre: float
	a_experts: float
	a_total: float
	r_pre: float
	r_experts: float
	r_total: float
	overhead: float
	s_total: float

	@root_validator(skip_on_failure=True)
	def check_identities(cls, values: dict) -> dict :
		def close(a: float, b: float) -> bool :
			return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))

		assert close(values['a_total'], values['a_pre'] + values['a_experts']), 'a_total must equal a_pre + a_experts'
		assert close(values['r_total'], values['r_pre'] + values['r_experts']), 'r_total must equal r_pre + r_experts'
		assert close(values['s_total'], values['a_total'] + values['r_total'] + values['overhead']), 's_total must equal a_total + r_total + overhead'
		return values


class ReductionFactors(BaseModel) :
	E: float
	convention: Convention
	rf_qkv_derived: float
	rf_attn_derived: float
	rf_qkv_paper: float
	rf_attn_paper: float


class CostRow(BaseModel) :
	"""
	one line of a cost sweep, in output column order.
	"""
	E: float
	a_pre: float
	a_experts: float
	a_total: float
	r_pre: float
	r_experts: float
	r_total: float
	overhead: float
	s_total: float
	rf_qkv_derived: float
	rf_qkv_paper: float
	rf_attn_derived: float
	rf_attn_paper: float


class OptResult(BaseModel) :
	e_min: int
	e_max: int
	convention: Convention
	e_opt_int: int
	s_at_opt: float
	e_opt_cont: float
	bracket: Tuple[float, float]
	s_at_cont: float
	derivative_at_opt: float
	derivative_tolerance: float
	at_boundary: bool


def traditional_costs(dims: ModelDims) -> Tuple[float, float] :
	"""
	:returns: (qkv, attention) totals over all E experts, each handling L full-width tokens
	"""
	E, L, d0 = dims.E, dims.L, dims.d0
	a: float = E * L * 3 * d0 * d0

	if dims.convention is Convention.paper_literal :
		return a, E * L * L * d0

	return a, 2 * E * L * L * d0


def sectional_qkv_costs(dims: ModelDims) -> Tuple[float, float, float] :
	E, L, d0 = dims.E, dims.L, dims.d0
	a_pre: float = 3 * E * L * d0 * d0
	a_experts: float = 3 * L * d0 * d0 / (E * E)
	return a_pre, a_experts, a_pre + a_experts


def sectional_qkv_costs_heads(dims: ModelDims) -> Tuple[float, float, float] :
	"""
	the per-head-square variant, where splitting a projection over H heads divides its cost by H.
	standard multi-head attention does not behave this way; the measured audit never uses it.
	"""
	a_pre, a_experts, _ = sectional_qkv_costs(dims)
	a_pre /= dims.h_pre
	a_experts /= dims.h_exp
	return a_pre, a_experts, a_pre + a_experts


def sectional_attn_costs(dims: ModelDims) -> Tuple[float, float, float] :
	E, L, d0 = dims.E, dims.L, dims.d0
	r_pre: float = 2 * E * L * L * d0
	r_experts: float = 2 * L * L * d0 / (E * E)
	return r_pre, r_experts, r_pre + r_experts


def overhead_cost(E: float, alpha: float) -> float :
	return alpha * E * E


def pairwise_overhead(E: float, c_e: float, c_pair: float) -> float :
	"""
	per-expert cost plus one c_pair/2 charge for each of the E(E-1) ordered expert pairs.
	"""
	return E * c_e + c_pair / 2 * E * (E - 1)


def total_cost(dims: ModelDims) -> CostBreakdown :
	a_trad, r_trad = traditional_costs(dims)
	a_pre, a_experts, a_total = sectional_qkv_costs(dims)
	r_pre, r_experts, r_total = sectional_attn_costs(dims)
	overhead: float = overhead_cost(dims.E, dims.alpha)

	return CostBreakdown(
		E=dims.E,
		convention=dims.convention,
		a_trad=a_trad,
		r_trad=r_trad,
		a_pre=a_pre,
		a_experts=a_experts,
		a_total=a_total,
		r_pre=r_pre,
		r_experts=r_experts,
		r_total=r_total,
		overhead=overhead,
		s_total=a_total + r_total + overhead,
	)


def s_of(dims: ModelDims, E: float) -> float :
	return total_cost(dims.at(E)).s_total


def _s_values(dims: ModelDims, E: np.ndarray) -> np.ndarray :
	# the operation order of total_cost, over an array of expert counts
	L, d0 = dims.L, dims.d0
	a_total: np.ndarray = 3 * E * L * d0 * d0 + 3 * L * d0 * d0 / (E * E)
	r_total: np.ndarray = 2 * E * L * L * d0 + 2 * L * L * d0 / (E * E)
	return a_total + r_total + dims.alpha * E * E


def _require_positive(E: float) -> float :
	if not E > 0 :
		raise DomainError(f'S(E) is only defined for E > 0, got {E}')

	return E


def ds_de(dims: ModelDims, E: Optional[float] = None) -> float :
	"""
	exact derivative of S: 3*L*d0^2*(1 - 2/E^3) + 2*L^2*d0 - 4*L^2*d0/E^3 + 2*alpha*E
	"""
	E = _require_positive(dims.E if E is None else E)
	L, d0 = dims.L, dims.d0
	return 3 * L * d0 * d0 * (1 - 2 / E ** 3) + 2 * L * L * d0 - 4 * L * L * d0 / E ** 3 + 2 * dims.alpha * E


def ds_de_paper_literal(dims: ModelDims, E: Optional[float] = None) -> float :
	"""
	the published closed form, which carries 2/E^4 in its first term. it disagrees with the
	finite differences of S and is kept only so the discrepancy can be reported.
	"""
	E = _require_positive(dims.E if E is None else E)
	L, d0 = dims.L, dims.d0
	return 3 * L * d0 * d0 * (1 - 2 / E ** 4) + 2 * L * L * d0 - 4 * L * L * d0 / E ** 3 + 2 * dims.alpha * E


def d2s_de2(dims: ModelDims, E: Optional[float] = None) -> float :
	E = _require_positive(dims.E if E is None else E)
	L, d0 = dims.L, dims.d0
	return (18 * L * d0 * d0 + 12 * L * L * d0) / E ** 4 + 2 * dims.alpha


def is_convex_on(dims: ModelDims, lo: float, hi: float, points: int = 64) -> bool :
	"""
	every term of S has a positive second derivative for E > 0 and alpha >= 0, so this holds
	on any positive interval; it samples d2s_de2 on a geometric grid to confirm it.
	"""
	_require_positive(lo)

	if hi < lo :
		raise ConfigError(f'empty interval [{lo}, {hi}]')

	return all(d2s_de2(dims, float(e)) > 0 for e in np.geomspace(lo, hi, points))


def central_difference(f: Callable[[float], float], x: float, h: float) -> float :
	return (f(x + h) - f(x - h)) / (2 * h)


def reduction_factors(dims: ModelDims) -> ReductionFactors :
	"""
	derived factors are traditional/sectional ratios of the component counts. the *_paper
	factors are the published closed forms, which do not follow from those components.
	"""
	E, L = dims.E, dims.L
	a_trad, r_trad = traditional_costs(dims)
	_, _, a_total = sectional_qkv_costs(dims)
	_, _, r_total = sectional_attn_costs(dims)
	e3: float = E ** 3

	return ReductionFactors(
		E=E,
		convention=dims.convention,
		rf_qkv_derived=a_trad / a_total,
		rf_attn_derived=r_trad / r_total,
		rf_qkv_paper=E ** 5 / (3 * (e3 + 1)),
		rf_attn_paper=e3 / (2 + 3 * e3 * L),
	)


def cost_row(dims: ModelDims) -> CostRow :
	breakdown: CostBreakdown = total_cost(dims)
	factors: ReductionFactors = reduction_factors(dims)
	return CostRow(**breakdown.dict(include=set(CostRow.__fields__)), **factors.dict(include=set(CostRow.__fields__) - { 'E' }))


def validate_range(e_min: int, e_max: int) -> None :
	if not 1 <= e_min <= e_max <= E_LIMIT :
		raise ConfigError(f'expert range [{e_min}, {e_max}] must satisfy 1 <= e_min <= e_max <= {E_LIMIT}')


def flag_off_model(dims: ModelDims, e_min: int, e_max: int) -> bool :
	"""
	the closed forms always take r = E^2, so a fixed r from the run config only matches E = sqrt(r).
	logs a warning and returns true when some expert count in [e_min, e_max] is off-model.
	"""
	if dims.r is None :
		return False

	if e_min == e_max and dims.r == e_min * e_min :
		return False

	logger.warning('reduction ratio r=%d is off-model over E in [%d, %d], costs are reported for r = E^2', dims.r, e_min, e_max)
	return True


def _golden_section(f: Callable[[float], float], a: float, b: float, rel_tol: float = 1e-9) -> Tuple[float, float] :
	"""
	shrinks [a, b] around the minimiser of a unimodal f until b - a < rel_tol * b.
	"""
	h: float = b - a

	if h <= rel_tol * b :
		return a, b

	c: float = a + INV_PHI_SQUARED * h
	d: float = a + INV_PHI * h
	yc, yd = f(c), f(d)

	while b - a >= rel_tol * b :
		if yc < yd :
			b, d, yd = d, c, yc
			h = INV_PHI * h
			c = a + INV_PHI_SQUARED * h
			yc = f(c)

		else :
			a, c, yc = c, d, yd
			h = INV_PHI * h
			d = a + INV_PHI * h
			yd = f(d)

	return (a, d) if yc < yd else (c, b)


def _bracket(dims: ModelDims, e_min: float, e_max: float) -> Tuple[float, float] :
	"""
	locates the sign change of ds_de on a geometric grid. S is convex, so ds_de is increasing
	and a range on which it never changes sign has its minimiser at one end.
	"""
	if e_min == e_max or ds_de(dims, e_min) >= 0 :
		return e_min, e_min

	if ds_de(dims, e_max) <= 0 :
		return e_max, e_max

	grid: np.ndarray = np.geomspace(e_min, e_max, 8 * ceil(log2(e_max / e_min)) + 2)
	slopes: np.ndarray = np.array([ds_de(dims, float(e)) for e in grid])
	i: int = int(np.argmax(slopes >= 0))
	return float(grid[i - 1]), float(grid[i])


def optimize_experts(dims: ModelDims, e_min: int, e_max: int) -> OptResult :
	"""
	integer argmin of S over [e_min, e_max] (ties go to the smaller E) alongside the continuous
	minimiser found by golden-section search inside the bracketing sign change of ds_de.
	"""
	validate_range(e_min, e_max)

	candidates: np.ndarray = np.arange(e_min, e_max + 1, dtype=np.float64)
	e_opt_int: int = e_min + int(np.argmin(_s_values(dims, candidates)))

	lo, hi = _bracket(dims, float(e_min), float(e_max))
	logger.debug('continuous optimum bracketed in [%r, %r]', lo, hi)
	f: Callable[[float], float] = lambda e : s_of(dims, e)

	a, b = _golden_section(f, lo, hi)
	e_opt_cont: float = (a + b) / 2
	s_at_cont: float = f(e_opt_cont)

	return OptResult(
		e_min=e_min,
		e_max=e_max,
		convention=dims.convention,
		e_opt_int=e_opt_int,
		s_at_opt=s_of(dims, e_opt_int),
		e_opt_cont=e_opt_cont,
		bracket=(lo, hi),
		s_at_cont=s_at_cont,
		derivative_at_opt=ds_de(dims, e_opt_cont),
		derivative_tolerance=1e-6 * s_at_cont,
		at_boundary=lo == hi,
	)


def sweep(dims: ModelDims, e_values: Sequence[float]) -> List[CostBreakdown] :
	if not e_values :
		raise ConfigError('sweep needs at least one expert count')

	for E in e_values :
		if not E >= 1 :
			raise ConfigError(f'expert count {E} is below 1')

	return [total_cost(dims.at(E)) for E in e_values]
