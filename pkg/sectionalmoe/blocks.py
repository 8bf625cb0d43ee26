from logging import Logger, getLogger
from math import sqrt
from typing import Any, Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, confloat, conint, root_validator

from sectionalmoe.errors import ConfigError, ContractError, DimensionError, EvaluationError, NonFiniteError
from sectionalmoe.models import Params, Strict
from sectionalmoe.tensor import Category, Tensor, add, concat_columns, counting, layer_norm_rows, matmul, recording, relu, scale, slice_columns, softmax_rows, transpose, unrecorded


logger: Logger = getLogger('sectionalmoe.blocks')

# roles tallied under `qkv` that belong to the Q, K and V projections proper
QKV_ROLES: Tuple[str, ...] = ('q', 'k', 'v')


class AttentionParams(Params) :
	w_q: Tensor
	w_k: Tensor
	w_v: Tensor
	w_o: Tensor
	heads: conint(ge=1)

	@root_validator(skip_on_failure=True)
	def check_shapes(cls, values: dict) -> dict :
		d: int = values['w_q'].shape[0]

		for name in ('w_q', 'w_k', 'w_v', 'w_o') :
			assert values[name].shape == (d, d), f'{name} must be {d}x{d}, got {values[name].shape}'

		assert d % values['heads'] == 0, f'd_model {d} is not divisible by {values["heads"]} heads'
		return values

	@property
	def d_model(self: 'AttentionParams') -> int :
		return self.w_q.shape[0]


class FfnParams(Params) :
	w1: Tensor
	b1: Tensor
	w2: Tensor
	b2: Tensor

	@root_validator(skip_on_failure=True)
	def check_shapes(cls, values: dict) -> dict :
		d, d_ff = values['w1'].shape if values['w1'].ndim == 2 else (0, 0)
		assert d and d_ff, 'w1 must be a d_model x d_ff matrix'
		assert values['b1'].shape == (d_ff,), f'b1 must have {d_ff} entries'
		assert values['w2'].shape == (d_ff, d), f'w2 must be {d_ff}x{d}'
		assert values['b2'].shape == (d,), f'b2 must have {d} entries'
		return values

	@property
	def d_model(self: 'FfnParams') -> int :
		return self.w1.shape[0]

	@property
	def d_ff(self: 'FfnParams') -> int :
		return self.w1.shape[1]


class LayerParams(Params) :
	attn: AttentionParams
	ffn: FfnParams
	ln1_gamma: Tensor
	ln1_beta: Tensor
	ln2_gamma: Tensor
	ln2_beta: Tensor
	eps: confloat(gt=0) = 1e-5

	@root_validator(skip_on_failure=True)
	def check_widths(cls, values: dict) -> dict :
		d: int = values['attn'].d_model
		assert values['ffn'].d_model == d, f'ffn width {values["ffn"].d_model} does not match attention width {d}'

		for name in ('ln1_gamma', 'ln1_beta', 'ln2_gamma', 'ln2_beta') :
			assert values[name].shape == (d,), f'{name} must have {d} entries'

		return values

	@property
	def d_model(self: 'LayerParams') -> int :
		return self.attn.d_model


class LayerDims(Strict) :
	d_model: conint(ge=2)
	heads: conint(ge=1) = 1
	d_ff: conint(ge=1)

	@root_validator(skip_on_failure=True)
	def check_heads(cls, values: dict) -> dict :
		assert values['d_model'] % values['heads'] == 0, f'd_model {values["d_model"]} is not divisible by {values["heads"]} heads'
		return values


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None, category: Union[Category, str] = Category.other, role: str = 'linear') -> Tensor :
	if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] :
		raise DimensionError('linear input width does not match the weight matrix', x.shape, w.shape)

	y: Tensor = matmul(x, w, category, role)

	if b is not None :
		y = add(y, b, Category.other, 'bias')

	return y


def causal_mask(t: int) -> np.ndarray :
	return np.tril(np.ones((t, t), dtype=bool))


def _check_attention_inputs(xq: Tensor, xkv: Tensor, p: AttentionParams, causal: bool) -> None :
	if xq.ndim != 2 or xkv.ndim != 2 or xq.shape[1] != p.d_model or xkv.shape[1] != p.d_model :
		raise DimensionError(f'attention inputs must be {p.d_model} wide', xq.shape, xkv.shape)

	if causal and xq.shape[0] != xkv.shape[0] :
		raise ContractError(f'causal attention needs equal query and key lengths, got {xq.shape[0]} and {xkv.shape[0]}')


def _head_weights(q: Tensor, k: Tensor, heads: int, causal: bool, scale_by_sqrt_dh: bool) -> List[Tensor] :
	dh: int = q.shape[1] // heads
	mask: Optional[np.ndarray] = causal_mask(q.shape[0]) if causal else None
	weights: List[Tensor] = []

	for h in range(heads) :
		qh: Tensor = slice_columns(q, h * dh, (h + 1) * dh)
		kh: Tensor = slice_columns(k, h * dh, (h + 1) * dh)
		scores: Tensor = matmul(qh, transpose(kh), Category.attn_scores, 'scores')

		if scale_by_sqrt_dh :
			scores = scale(scores, 1 / sqrt(dh))

		weights.append(softmax_rows(scores, mask))

	return weights


def attention_weights(xq: Tensor, xkv: Tensor, p: AttentionParams, causal: bool = False, scale_by_sqrt_dh: bool = True) -> List[Tensor] :
	"""
	per-head attention weight matrices, each Tq x Tkv with rows summing to one.
	"""
	_check_attention_inputs(xq, xkv, p, causal)
	q: Tensor = linear(xq, p.w_q, None, Category.qkv, 'q')
	k: Tensor = linear(xkv, p.w_k, None, Category.qkv, 'k')
	return _head_weights(q, k, p.heads, causal, scale_by_sqrt_dh)


def mha_forward(xq: Tensor, xkv: Tensor, p: AttentionParams, causal: bool = False, scale_by_sqrt_dh: bool = True) -> Tensor :
	"""
	multi-head attention of the xq rows over the xkv rows. the Q/K/V projections and the
	output projection are tallied under `qkv` (roles q, k, v, out_proj); QK^T and the
	weighted sum of values under `attn_scores`, 2*Tq*Tkv*d in total for any head count.
	"""
	_check_attention_inputs(xq, xkv, p, causal)
	q: Tensor = linear(xq, p.w_q, None, Category.qkv, 'q')
	k: Tensor = linear(xkv, p.w_k, None, Category.qkv, 'k')
	v: Tensor = linear(xkv, p.w_v, None, Category.qkv, 'v')
	dh: int = p.d_model // p.heads

	contexts: List[Tensor] = [
		matmul(w, slice_columns(v, h * dh, (h + 1) * dh), Category.attn_scores, 'values')
		for h, w in enumerate(_head_weights(q, k, p.heads, causal, scale_by_sqrt_dh))
	]

	context: Tensor = contexts[0] if len(contexts) == 1 else concat_columns(contexts)
	return linear(context, p.w_o, None, Category.qkv, 'out_proj')


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor :
	if x.ndim != 2 or x.shape[1] != p.d_model :
		raise DimensionError(f'ffn input must be {p.d_model} wide', x.shape)

	hidden: Tensor = relu(linear(x, p.w1, p.b1, Category.ffn, 'w1'))
	return linear(hidden, p.w2, p.b2, Category.ffn, 'w2')


def transformer_layer(x: Tensor, p: LayerParams, causal: bool = False, scale_by_sqrt_dh: bool = True) -> Tensor :
	"""
	pre-norm residual layer: y = x + mha(ln1(x)), then y + ffn(ln2(y)).
	"""
	if x.ndim != 2 or x.shape[1] != p.d_model :
		raise DimensionError(f'layer input must be {p.d_model} wide', x.shape)

	h: Tensor = layer_norm_rows(x, p.ln1_gamma, p.ln1_beta, p.eps)
	y: Tensor = add(x, mha_forward(h, h, p.attn, causal, scale_by_sqrt_dh), Category.other, 'residual')
	h = layer_norm_rows(y, p.ln2_gamma, p.ln2_beta, p.eps)
	return add(y, ffn_forward(h, p.ffn), Category.other, 'residual')


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor :
	w: np.ndarray = rng.standard_normal(shape)
	outside: np.ndarray = np.abs(w) > 3

	while outside.any() :
		w[outside] = rng.standard_normal(int(outside.sum()))
		outside = np.abs(w) > 3

	return Tensor.wrap(w / sqrt(fan_in))


def init_attention(d_model: int, heads: int, rng: np.random.Generator) -> AttentionParams :
	return AttentionParams(
		w_q=_truncated_normal(rng, (d_model, d_model), d_model),
		w_k=_truncated_normal(rng, (d_model, d_model), d_model),
		w_v=_truncated_normal(rng, (d_model, d_model), d_model),
		w_o=_truncated_normal(rng, (d_model, d_model), d_model),
		heads=heads,
	)


def init_ffn(d_model: int, d_ff: int, rng: np.random.Generator) -> FfnParams :
	return FfnParams(
		w1=_truncated_normal(rng, (d_model, d_ff), d_model),
		b1=Tensor.wrap(np.zeros(d_ff)),
		w2=_truncated_normal(rng, (d_ff, d_model), d_ff),
		b2=Tensor.wrap(np.zeros(d_model)),
	)


def init_layer(dims: LayerDims, rng: np.random.Generator) -> LayerParams :
	return LayerParams(
		attn=init_attention(dims.d_model, dims.heads, rng),
		ffn=init_ffn(dims.d_model, dims.d_ff, rng),
		ln1_gamma=Tensor.wrap(np.ones(dims.d_model)),
		ln1_beta=Tensor.wrap(np.zeros(dims.d_model)),
		ln2_gamma=Tensor.wrap(np.ones(dims.d_model)),
		ln2_beta=Tensor.wrap(np.zeros(dims.d_model)),
	)


def init_params(dims: LayerDims, seed: int) -> LayerParams :
	"""
	deterministic initialisation: weights are normal with std 1/sqrt(fan_in), redrawn beyond
	three standard deviations; biases and betas are zero, gammas one.
	"""
	return init_layer(dims, np.random.default_rng(seed))


def layer_param_count(d_model: int, d_ff: int) -> int :
	attention: int = 4 * d_model * d_model
	ffn: int = 2 * d_model * d_ff + d_ff + d_model
	return attention + ffn + 4 * d_model


Path = Tuple[Union[str, int], ...]


def tree_leaves(node: Any, path: Path = ()) -> List[Tuple[Path, Tensor]] :
	"""
	every tensor reachable from `node` through model fields, lists and tuples, in field order.
	"""
	if isinstance(node, Tensor) :
		return [(path, node)]

	leaves: List[Tuple[Path, Tensor]] = []

	if isinstance(node, BaseModel) :
		for name in node.__fields__ :
			leaves += tree_leaves(getattr(node, name), path + (name,))

	elif isinstance(node, (list, tuple)) :
		for i, item in enumerate(node) :
			leaves += tree_leaves(item, path + (i,))

	return leaves


def tree_replace(node: Any, path: Path, leaf: Tensor) -> Any :
	if not path :
		return leaf

	head: Union[str, int] = path[0]

	if isinstance(node, BaseModel) :
		return node.copy(update={ head: tree_replace(getattr(node, head), path[1:], leaf) })

	items: list = list(node)
	items[head] = tree_replace(items[head], path[1:], leaf)  # type: ignore
	return type(node)(items) if isinstance(node, tuple) else items


def param_total(node: Any) -> int :
	return sum(t.size for _, t in tree_leaves(node))


class CoordinateError(BaseModel) :
	leaf: str
	index: int
	analytic: float
	numeric: float
	rel_error: float


class GradCheckReport(BaseModel) :
	label: str = ''
	h: float
	tol: float
	checked: int
	skipped: int
	max_rel_error: float
	failing: List[CoordinateError]
	passed: bool


# a coordinate whose second difference exceeds this (relative to max(1, |grad|)) straddles a relu kink
_KINK_TOL: float = 1e-4

# coordinates whose analytic and numeric gradients are both this small count as matching
_ZERO_CUTOFF: float = 1e-8


def _objective(f: Callable[[Any], Tensor], params: Any) -> Tensor :
	try :
		out: Tensor = f(params)

	except NonFiniteError as e :
		raise EvaluationError(f'objective produced a non-finite value: {e}') from e

	if not isinstance(out, Tensor) or out.size != 1 :
		raise EvaluationError('grad_check needs an objective that returns a single-entry tensor')

	return out


def _value(f: Callable[[Any], Tensor], params: Any) -> float :
	with counting(), unrecorded() :
		return float(_objective(f, params).data[0])


def _perturbed(leaf: Tensor, index: int, delta: float) -> Tensor :
	array: np.ndarray = leaf.array.copy()
	array.reshape(-1)[index] += delta
	return Tensor.wrap(array)


def grad_check(
	f: Callable[[Any], Tensor],
	params: Any,
	h: float = 1e-5,
	tol: float = 1e-4,
	samples: int = 200,
	seed: int = 0,
	label: str = '',
) -> GradCheckReport :
	"""
	compares tape gradients of the scalar objective `f` against central differences
	(f(θ+h·e) − f(θ−h·e)) / 2h on a seeded sample of coordinates (all of them when there are
	no more than `samples`). relative error is |a − n| / max(|a|, |n|), taken as zero where both
	magnitudes are at most 1e-8. a report that checked no coordinate does not pass.

	:param params: any tree of models, lists and tuples holding distinct Tensor leaves
	"""
	if not h > 0 :
		raise ConfigError(f'finite difference step must be positive, got {h}')

	leaves: List[Tuple[Path, Tensor]] = tree_leaves(params)

	with counting(), recording() as tape :
		out: Tensor = _objective(f, params)

	grads: List[np.ndarray] = tape.grad(out, [t for _, t in leaves])
	coordinates: List[Tuple[int, int]] = [(i, j) for i, (_, t) in enumerate(leaves) for j in range(t.size)]

	if len(coordinates) > samples :
		picked: np.ndarray = np.sort(np.random.default_rng(seed).choice(len(coordinates), samples, replace=False))
		coordinates = [coordinates[p] for p in picked]

	f0: float = float(out.data[0])
	failing: List[CoordinateError] = []
	max_rel_error: float = 0.0
	skipped: int = 0

	for i, j in coordinates :
		path, leaf = leaves[i]
		f_plus: float = _value(f, tree_replace(params, path, _perturbed(leaf, j, h)))
		f_minus: float = _value(f, tree_replace(params, path, _perturbed(leaf, j, -h)))
		numeric: float = (f_plus - f_minus) / (2 * h)

		if abs(f_plus - 2 * f0 + f_minus) / h > _KINK_TOL * max(1.0, abs(numeric)) :
			skipped += 1
			continue

		analytic: float = float(grads[i].reshape(-1)[j])
		magnitude: float = max(abs(analytic), abs(numeric))
		rel_error: float = abs(analytic - numeric) / magnitude if magnitude > _ZERO_CUTOFF else 0.0
		max_rel_error = max(max_rel_error, rel_error)

		if rel_error > tol :
			failing.append(CoordinateError(
				leaf='.'.join(map(str, path)),
				index=j,
				analytic=analytic,
				numeric=numeric,
				rel_error=rel_error,
			))

	checked: int = len(coordinates) - skipped

	if skipped :
		logger.warning('%s: skipped %d of %d coordinates straddling a non-differentiable point', label or 'grad_check', skipped, len(coordinates))

	return GradCheckReport(
		label=label,
		h=h,
		tol=tol,
		checked=checked,
		skipped=skipped,
		max_rel_error=max_rel_error,
		failing=failing,
		passed=checked > 0 and not failing,
	)


def sample_input(tokens: int, width: int, seed: int) -> Tensor :
	"""
	standard normal token matrix, reproducible from `seed`.
	"""
	return Tensor.wrap(np.random.default_rng(seed).standard_normal((tokens, width)))
