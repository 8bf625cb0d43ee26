from logging import Logger, getLogger
from math import ceil, log
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, conint, root_validator

from sectionalmoe.blocks import AttentionParams, FfnParams, ffn_forward, init_attention, init_ffn, mha_forward, tree_leaves
from sectionalmoe.errors import ConfigError, DimensionError
from sectionalmoe.models import Params
from sectionalmoe.tensor import Category, Tensor, matmul, stage


logger: Logger = getLogger('sectionalmoe.traditional')

Expert = Union[FfnParams, AttentionParams]

# absorbs rounding in cf*k*T/E so that e.g. 1.1 * 10 gives a capacity of 11, not 12
_CAPACITY_SLACK: float = 1e-9


class RoutingAssignment(BaseModel) :
	"""
	per token, the selected experts in descending logit order with their renormalised gate
	weights. dropped[t][j] marks selection j of token t as refused for lack of capacity.
	"""
	experts: List[List[int]]
	weights: List[List[float]]
	dropped: List[List[bool]]
	num_experts: conint(ge=1)
	k: conint(ge=1)
	capacity: Optional[conint(ge=0)] = None

	@root_validator(skip_on_failure=True)
	def check_selections(cls, values: dict) -> dict :
		E, k = values['num_experts'], values['k']
		assert k <= E, f'k {k} exceeds the {E} experts'
		assert len(values['experts']) == len(values['weights']) == len(values['dropped']), 'per-token lists must have equal lengths'

		for experts, weights, dropped in zip(values['experts'], values['weights'], values['dropped']) :
			assert len(experts) == len(weights) == len(dropped) == k, f'every token selects exactly {k} experts'
			assert len(set(experts)) == k and all(0 <= e < E for e in experts), f'expert indices must be distinct and below {E}'
			assert all(w >= 0 for w in weights) and abs(sum(weights) - 1) <= 1e-12, 'gate weights must be a distribution'

		return values

	@property
	def tokens(self: 'RoutingAssignment') -> int :
		return len(self.experts)


class RoutingStats(BaseModel) :
	tokens_per_expert: List[int]
	coefficient_of_variation: float
	entropy: float
	kl_to_uniform: float
	overflow_count: int
	capacity: Optional[int] = None
	unused_capacity: List[float] = []


class TraditionalParams(Params) :
	gate: Tensor
	experts: List[Expert]

	@root_validator(skip_on_failure=True)
	def check_gate(cls, values: dict) -> dict :
		gate: Tensor = values['gate']
		assert gate.ndim == 2 and gate.shape[1] == len(values['experts']), 'the gate needs one column per expert'
		assert all(e.d_model == gate.shape[0] for e in values['experts']), f'experts must be {gate.shape[0]} wide'
		return values


def select_top_k(row: np.ndarray, k: int) -> np.ndarray :
	"""
	indices of the k largest entries, largest first. equal entries keep ascending index order.
	"""
	return np.argsort(-row, kind='stable')[:k]


def gate(x: Tensor, wg: Tensor, k: int) -> RoutingAssignment :
	E: int = wg.shape[1] if wg.ndim == 2 else 0

	if not 1 <= k <= E :
		raise ConfigError(f'k must lie in [1, {E}], got {k}')

	logits: np.ndarray = matmul(x, wg, Category.router, 'logits').array
	experts: List[List[int]] = []
	weights: List[List[float]] = []

	for row in logits :
		picked: np.ndarray = select_top_k(row, k)
		selected: np.ndarray = row[picked]
		e: np.ndarray = np.exp(selected - selected.max())
		experts.append(picked.tolist())
		weights.append((e / e.sum()).tolist())

	return RoutingAssignment(
		experts=experts,
		weights=weights,
		dropped=[[False] * k for _ in experts],
		num_experts=E,
		k=k,
	)


def expert_capacity(capacity_factor: float, k: int, tokens: int, E: int) -> int :
	if not capacity_factor > 0 :
		raise ConfigError(f'capacity factor must be positive, got {capacity_factor}')

	return max(0, ceil(capacity_factor * k * tokens / E - _CAPACITY_SLACK))


def apply_capacity(assignment: RoutingAssignment, capacity_factor: float) -> RoutingAssignment :
	"""
	walks tokens in order, each token's selections in rank order, and drops every selection
	that finds its expert already full.
	"""
	capacity: int = expert_capacity(capacity_factor, assignment.k, assignment.tokens, assignment.num_experts)
	load: List[int] = [0] * assignment.num_experts
	dropped: List[List[bool]] = []

	for experts in assignment.experts :
		row: List[bool] = []

		for e in experts :
			row.append(load[e] >= capacity)
			load[e] += not row[-1]

		dropped.append(row)

	logger.debug('expert capacity %d, loads %s', capacity, load)
	return assignment.copy(update={ 'dropped': dropped, 'capacity': capacity })


def run_expert(x: Tensor, expert: Expert) -> Tensor :
	if isinstance(expert, FfnParams) :
		return ffn_forward(x, expert)

	return mha_forward(x, x, expert)


def dispatch_combine(x: Tensor, assignment: RoutingAssignment, experts: Sequence[Expert], capacity_factor: Optional[float] = None) -> Tuple[Tensor, RoutingStats] :
	"""
	every expert processes its kept tokens as one sequence, in token order. the output for a
	token is its residual plus the gate-weighted outputs of the experts that kept it.

	an assignment without a capacity is first passed through apply_capacity, which needs
	`capacity_factor`. an assignment that already carries one is dispatched as it is; a factor
	given alongside it must yield that same capacity.
	"""
	if len(experts) != assignment.num_experts :
		raise ConfigError(f'assignment routes over {assignment.num_experts} experts but {len(experts)} were given')

	if x.ndim != 2 or x.shape[0] != assignment.tokens :
		raise DimensionError(f'input must hold the {assignment.tokens} routed tokens', x.shape)

	if assignment.capacity is None :
		if capacity_factor is None :
			raise ConfigError('the assignment carries no capacity, so a capacity factor is required')

		assignment = apply_capacity(assignment, capacity_factor)

	elif capacity_factor is not None :
		implied: int = expert_capacity(capacity_factor, assignment.k, assignment.tokens, assignment.num_experts)

		if implied != assignment.capacity :
			raise ConfigError(f'capacity factor {capacity_factor} implies a capacity of {implied}, but the assignment carries {assignment.capacity}')

	combined: np.ndarray = np.zeros(x.shape)

	for e, expert in enumerate(experts) :
		rows: List[int] = []
		weights: List[float] = []

		for t, (selected, gates, dropped) in enumerate(zip(assignment.experts, assignment.weights, assignment.dropped)) :
			for s, w, d in zip(selected, gates, dropped) :
				if s == e and not d :
					rows.append(t)
					weights.append(w)

		if not rows :
			continue

		with stage(f'experts:{e}') :
			y: Tensor = run_expert(Tensor.wrap(x.array[rows]), expert)

		combined[rows] += np.asarray(weights)[:, None] * y.array

	return Tensor.wrap(x.array + combined), routing_stats(assignment, assignment.num_experts)


def traditional_forward(x: Tensor, params: TraditionalParams, k: int = 1, capacity_factor: float = 1.25) -> Tuple[Tensor, RoutingStats] :
	assignment: RoutingAssignment = gate(x, params.gate, k)
	return dispatch_combine(x, assignment, params.experts, capacity_factor)


def routing_stats(assignment: RoutingAssignment, E: Optional[int] = None) -> RoutingStats :
	E = assignment.num_experts if E is None else E

	if E < assignment.num_experts :
		raise ConfigError(f'assignment routes over {assignment.num_experts} experts, more than {E}')

	counts: np.ndarray = np.zeros(E, dtype=np.int64)
	overflow: int = 0

	for selected, dropped in zip(assignment.experts, assignment.dropped) :
		for e, d in zip(selected, dropped) :
			if d :
				overflow += 1

			else :
				counts[e] += 1

	total: int = int(counts.sum())
	mean: float = total / E
	cv: float = float(counts.std() / mean) if mean > 0 else 0.0
	p: np.ndarray = counts[counts > 0] / total if total else np.zeros(0)
	entropy: float = max(0.0, float(-(p * np.log(p)).sum()))

	capacity: Optional[int] = assignment.capacity
	unused: List[float] = []

	if capacity is not None :
		unused = [(capacity - int(c)) / capacity if capacity else 0.0 for c in counts]

	return RoutingStats(
		tokens_per_expert=counts.tolist(),
		coefficient_of_variation=cv,
		entropy=entropy,
		kl_to_uniform=max(0.0, log(E) - entropy) if total else 0.0,
		overflow_count=overflow,
		capacity=capacity,
		unused_capacity=unused,
	)


def uniform_assignment(tokens: int, E: int) -> RoutingAssignment :
	"""
	top-1 routing in which expert e receives exactly the contiguous tokens [e*L, (e+1)*L).
	"""
	if E < 1 or tokens % E :
		raise ConfigError(f'{tokens} tokens cannot be shared equally among {E} experts')

	per_expert: int = tokens // E

	return RoutingAssignment(
		experts=[[t // per_expert] for t in range(tokens)],
		weights=[[1.0] for _ in range(tokens)],
		dropped=[[False] for _ in range(tokens)],
		num_experts=E,
		k=1,
		capacity=per_expert,
	)


def expert_similarity(experts: Sequence[Expert]) -> np.ndarray :
	"""
	pairwise cosine similarity of the experts' flattened weights. zero vectors compare as 0.
	"""
	vectors: np.ndarray = np.stack([np.concatenate([t.data for _, t in tree_leaves(e)]) for e in experts])
	norms: np.ndarray = np.linalg.norm(vectors, axis=1)
	safe: np.ndarray = np.where(norms > 0, norms, 1.0)
	unit: np.ndarray = vectors / safe[:, None]
	return (unit @ unit.T) * np.outer(norms > 0, norms > 0)


def mean_similarity(experts: Sequence[Expert]) -> float :
	E: int = len(experts)

	if E < 2 :
		return 0.0

	s: np.ndarray = expert_similarity(experts)
	return float((s.sum() - np.trace(s)) / (E * (E - 1)))


def init_traditional(d0: int, E: int, d_ff: int, seed: int, attention_experts: bool = False, heads: int = 1) -> TraditionalParams :
	"""
	gate columns are standard normal scaled by 1/sqrt(d0); experts are FFNs of hidden width
	d_ff, or full attention blocks when `attention_experts` is set.
	"""
	gate_rng, *rngs = map(np.random.default_rng, np.random.SeedSequence(seed).spawn(E + 1))
	experts: List[Expert] = [
		init_attention(d0, heads, rng) if attention_experts else init_ffn(d0, d_ff, rng)
		for rng in rngs
	]

	return TraditionalParams(
		gate=Tensor.wrap(gate_rng.standard_normal((d0, E)) / np.sqrt(d0)),
		experts=experts,
	)
