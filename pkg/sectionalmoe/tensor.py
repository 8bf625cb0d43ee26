"""
dense row-major tensors and the handful of primitives the architectures are built from.

every primitive that performs multiply-accumulates reports them to the active OpCounter,
one count per scalar multiply-add, and every primitive can be recorded on a Tape so that
scalar objectives can be differentiated through the adjoint rules in `_adjoints`.
"""
from collections import defaultdict
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from math import prod
from threading import Lock
from typing import Any, Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from sectionalmoe.errors import ConfigError, DimensionError, NonFiniteError, UnsupportedOperation


class Category(Enum) :
	qkv         = 'qkv'
	attn_scores = 'attn_scores'
	ffn         = 'ffn'
	router      = 'router'
	pooling     = 'pooling'
	aggregation = 'aggregation'
	other       = 'other'


def _freeze(array: np.ndarray) -> np.ndarray :
	array = np.ascontiguousarray(array, dtype=np.float64)

	if not 1 <= array.ndim <= 3 :
		raise DimensionError(f'tensors must have rank 1 to 3, got rank {array.ndim}', array.shape)

	if not all(array.shape) :
		raise DimensionError('tensor dimensions must be positive', array.shape)

	if not np.isfinite(array).all() :
		raise NonFiniteError(f'tensor of shape {array.shape} contains non-finite entries')

	array.setflags(write=False)
	return array


class Tensor :

	__slots__ = ('_array',)

	def __init__(self: 'Tensor', data: Any, shape: Optional[Sequence[int]] = None) -> None :
		array: np.ndarray = np.array(data, dtype=np.float64)

		if shape is not None :
			shape = tuple(shape)
			if array.size != prod(shape) :
				raise DimensionError('data length does not match the product of the shape', (array.size,), shape)
			array = array.reshape(shape)

		self._array: np.ndarray = _freeze(array)


	@classmethod
	def wrap(cls, array: np.ndarray) -> 'Tensor' :
		"""
		builds a tensor around an existing array without copying it. the array is made read-only.
		"""
		tensor: Tensor = cls.__new__(cls)
		tensor._array = _freeze(np.atleast_1d(array))
		return tensor


	@property
	def array(self: 'Tensor') -> np.ndarray :
		return self._array


	@property
	def shape(self: 'Tensor') -> Tuple[int, ...] :
		return self._array.shape


	@property
	def data(self: 'Tensor') -> np.ndarray :
		return self._array.reshape(-1)


	@property
	def ndim(self: 'Tensor') -> int :
		return self._array.ndim


	@property
	def size(self: 'Tensor') -> int :
		return self._array.size


	def tolist(self: 'Tensor') -> list :
		return self._array.tolist()


	def equals(self: 'Tensor', other: 'Tensor') -> bool :
		return self.shape == other.shape and bool(np.array_equal(self._array, other._array))


	def __repr__(self: 'Tensor') -> str :
		return f'Tensor(shape={self.shape}, data={self._array.tolist()})'


def zeros(*shape: int) -> Tensor :
	return Tensor.wrap(np.zeros(shape))


def ones(*shape: int) -> Tensor :
	return Tensor.wrap(np.ones(shape))


def identity(n: int) -> Tensor :
	return Tensor.wrap(np.eye(n))


class OpCounter :
	"""
	thread-safe multiply-accumulate tally. each count is keyed by the stage it happened in,
	its category, and the role of the operation inside its block (q, k, v, out_proj, ...).
	"""

	def __init__(self: 'OpCounter') -> None :
		self._lock: Lock = Lock()
		self._tally: Dict[Tuple[str, Category, str], int] = defaultdict(int)


	def add(self: 'OpCounter', category: Union[Category, str], macs: int, role: str = '', stage: str = '') -> None :
		category = Category(category)

		if macs < 0 :
			raise ValueError(f'counts never decrease, received {macs} for {category.value}')

		with self._lock :
			self._tally[(stage, category, role)] += int(macs)


	@property
	def macs_by_category(self: 'OpCounter') -> Dict[Category, int] :
		counts: Dict[Category, int] = { c: 0 for c in Category }

		with self._lock :
			for (_, category, _), macs in self._tally.items() :
				counts[category] += macs

		return counts


	def total(self: 'OpCounter') -> int :
		return sum(self.macs_by_category.values())


	def count(
		self: 'OpCounter',
		category: Optional[Category] = None,
		stage: Optional[str] = None,
		roles: Optional[Iterable[str]] = None,
		exclude_roles: Iterable[str] = (),
	) -> int :
		"""
		:param stage: matches the stage itself and any sub-stage written as "<stage>:<suffix>"
		"""
		wanted: Optional[set] = set(roles) if roles is not None else None
		excluded: set = set(exclude_roles)
		total: int = 0

		with self._lock :
			for (s, c, r), macs in self._tally.items() :
				if category is not None and c is not category :
					continue

				if stage is not None and s != stage and not s.startswith(stage + ':') :
					continue

				if (wanted is not None and r not in wanted) or r in excluded :
					continue

				total += macs

		return total


	def stages(self: 'OpCounter') -> List[str] :
		with self._lock :
			return sorted({ s for s, _, _ in self._tally })


	def snapshot(self: 'OpCounter') -> Dict[str, int] :
		return { c.value: n for c, n in self.macs_by_category.items() }


	def reset(self: 'OpCounter') -> None :
		with self._lock :
			self._tally.clear()


_active_counter: ContextVar[Optional[OpCounter]] = ContextVar('sectionalmoe_counter', default=None)
_active_stage: ContextVar[str] = ContextVar('sectionalmoe_stage', default='')
_active_redirect: ContextVar[Optional[Category]] = ContextVar('sectionalmoe_redirect', default=None)


@contextmanager
def counting(counter: Optional[OpCounter] = None) -> Iterator[OpCounter] :
	"""
	opens a measurement scope. scopes nest; the innermost counter receives every tally.
	"""
	counter = counter if counter is not None else OpCounter()
	token = _active_counter.set(counter)

	try :
		yield counter

	finally :
		_active_counter.reset(token)


@contextmanager
def stage(name: str) -> Iterator[str] :
	token = _active_stage.set(name)

	try :
		yield name

	finally :
		_active_stage.reset(token)


@contextmanager
def tallied_as(category: Category) -> Iterator[Category] :
	"""
	every tally made inside this scope is booked under `category`, keeping its role.
	"""
	token = _active_redirect.set(Category(category))

	try :
		yield category

	finally :
		_active_redirect.reset(token)


def tally(category: Category, macs: int, role: str = '') -> None :
	counter: Optional[OpCounter] = _active_counter.get()

	if counter is None :
		return

	redirect: Optional[Category] = _active_redirect.get()
	counter.add(redirect if redirect is not None else category, macs, role, _active_stage.get())


class _Record(NamedTuple) :
	op: str
	inputs: Tuple[Tensor, ...]
	output: Tensor
	attrs: Dict[str, Any]


class Tape :
	"""
	records primitive calls made while it is active, then walks them backwards applying the
	adjoint rules. records from concurrent experts interleave but every record still follows
	the records that produced its inputs, so the reversed order stays valid.
	"""

	def __init__(self: 'Tape') -> None :
		self._lock: Lock = Lock()
		self._records: List[_Record] = []


	def __len__(self: 'Tape') -> int :
		return len(self._records)


	def record(self: 'Tape', op: str, inputs: Tuple[Tensor, ...], output: Tensor, attrs: Dict[str, Any]) -> None :
		with self._lock :
			self._records.append(_Record(op, inputs, output, attrs))


	def gradients(self: 'Tape', output: Tensor, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray] :
		"""
		:returns: map of id(tensor) -> gradient of <seed, output> with respect to that tensor
		"""
		grads: Dict[int, np.ndarray] = { id(output): np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64) }

		for rec in reversed(self._records) :
			upstream: Optional[np.ndarray] = grads.get(id(rec.output))

			if upstream is None :
				continue

			arrays: Tuple[np.ndarray, ...] = tuple(t.array for t in rec.inputs)

			for tensor, grad in zip(rec.inputs, _adjoints[rec.op](arrays, rec.output.array, upstream, **rec.attrs)) :
				key: int = id(tensor)
				grads[key] = grads[key] + grad if key in grads else grad

		return grads


	def grad(self: 'Tape', output: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray] :
		grads: Dict[int, np.ndarray] = self.gradients(output)
		return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


_active_tape: ContextVar[Optional[Tape]] = ContextVar('sectionalmoe_tape', default=None)


@contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape] :
	tape = tape if tape is not None else Tape()
	token = _active_tape.set(tape)

	try :
		yield tape

	finally :
		_active_tape.reset(token)


@contextmanager
def unrecorded() -> Iterator[None] :
	token = _active_tape.set(None)

	try :
		yield

	finally :
		_active_tape.reset(token)


# forward kernels: arrays in, array out, nothing counted or recorded

def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray :
	return a @ b


def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray :
	return a + b


def _relu(a: np.ndarray) -> np.ndarray :
	return np.maximum(a, 0.0)


def _scale(a: np.ndarray, factor: float) -> np.ndarray :
	return a * factor


def _transpose(a: np.ndarray) -> np.ndarray :
	return a.T.copy()


def _softmax_rows(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray :
	z: np.ndarray = x if mask is None else np.where(mask, x, -np.inf)
	e: np.ndarray = np.exp(z - z.max(axis=1, keepdims=True))
	return e / e.sum(axis=1, keepdims=True)


def _normalize(x: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray] :
	centered: np.ndarray = x - x.mean(axis=1, keepdims=True)
	std: np.ndarray = np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
	return centered / std, std


def _layer_norm_rows(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray :
	xhat, _ = _normalize(x, eps)
	return xhat * gamma + beta


def _mean_pool_strided(x: np.ndarray, r: int) -> np.ndarray :
	return x.reshape(x.shape[0] // r, r, x.shape[1]).mean(axis=1)


def _slice_columns(a: np.ndarray, start: int, stop: int) -> np.ndarray :
	return a[:, start:stop].copy()


def _concat_columns(*arrays: np.ndarray) -> np.ndarray :
	return np.concatenate(arrays, axis=1)


def _sum_all(a: np.ndarray) -> np.ndarray :
	return np.array([a.sum()])


_forwards: Dict[str, Callable[..., np.ndarray]] = {
	'matmul': _matmul,
	'add': _add,
	'relu': _relu,
	'scale': _scale,
	'transpose': _transpose,
	'softmax_rows': _softmax_rows,
	'layer_norm_rows': _layer_norm_rows,
	'mean_pool_strided': _mean_pool_strided,
	'slice_columns': _slice_columns,
	'concat_columns': _concat_columns,
	'sum_all': _sum_all,
}


# adjoint rules: (input arrays, forward output, upstream gradient, **attrs) -> one gradient per input

def _matmul_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	a, b = inputs
	return g @ b.T, a.T @ g


def _add_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	a, b = inputs
	return g, g if b.shape == a.shape else g.sum(axis=0)


def _relu_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	return (g * (inputs[0] > 0),)


def _scale_adjoint(_: Tuple[np.ndarray, ...], __: np.ndarray, g: np.ndarray, factor: float) -> Tuple[np.ndarray, ...] :
	return (g * factor,)


def _transpose_adjoint(_: Tuple[np.ndarray, ...], __: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	return (g.T.copy(),)


def _softmax_rows_adjoint(_: Tuple[np.ndarray, ...], y: np.ndarray, g: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ...] :
	return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _layer_norm_rows_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray, eps: float) -> Tuple[np.ndarray, ...] :
	x, gamma, _ = inputs
	xhat, std = _normalize(x, eps)
	dxhat: np.ndarray = g * gamma
	dx: np.ndarray = (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / std
	return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _mean_pool_strided_adjoint(_: Tuple[np.ndarray, ...], __: np.ndarray, g: np.ndarray, r: int) -> Tuple[np.ndarray, ...] :
	return (np.repeat(g, r, axis=0) / r,)


def _slice_columns_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray, start: int, stop: int) -> Tuple[np.ndarray, ...] :
	dx: np.ndarray = np.zeros(inputs[0].shape)
	dx[:, start:stop] = g
	return (dx,)


def _concat_columns_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	bounds: np.ndarray = np.cumsum([a.shape[1] for a in inputs])[:-1]
	return tuple(np.split(g, bounds, axis=1))


def _sum_all_adjoint(inputs: Tuple[np.ndarray, ...], _: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, ...] :
	return (np.full(inputs[0].shape, g.reshape(-1)[0]),)


_adjoints: Dict[str, Callable[..., Tuple[np.ndarray, ...]]] = {
	'matmul': _matmul_adjoint,
	'add': _add_adjoint,
	'relu': _relu_adjoint,
	'scale': _scale_adjoint,
	'transpose': _transpose_adjoint,
	'softmax_rows': _softmax_rows_adjoint,
	'layer_norm_rows': _layer_norm_rows_adjoint,
	'mean_pool_strided': _mean_pool_strided_adjoint,
	'slice_columns': _slice_columns_adjoint,
	'concat_columns': _concat_columns_adjoint,
	'sum_all': _sum_all_adjoint,
}


def _apply(op: str, inputs: Tuple[Tensor, ...], **attrs: Any) -> Tensor :
	output: Tensor = Tensor.wrap(_forwards[op](*(t.array for t in inputs), **attrs))
	tape: Optional[Tape] = _active_tape.get()

	if tape is not None :
		tape.record(op, inputs, output, attrs)

	return output


def _require_rank(op: str, tensor: Tensor, rank: int) -> None :
	if tensor.ndim != rank :
		raise DimensionError(f'{op} expects a rank {rank} tensor', tensor.shape)


def matmul(a: Tensor, b: Tensor, category: Union[Category, str] = Category.other, role: str = 'matmul') -> Tensor :
	category = Category(category)
	_require_rank('matmul', a, 2)
	_require_rank('matmul', b, 2)

	if a.shape[1] != b.shape[0] :
		raise DimensionError('matmul inner dimensions disagree', a.shape, b.shape)

	m, k = a.shape
	n: int = b.shape[1]
	tally(category, m * n * k, role)
	return _apply('matmul', (a, b))


def add(a: Tensor, b: Tensor, category: Union[Category, str] = Category.other, role: str = 'add') -> Tensor :
	"""
	elementwise sum. `b` may also be a row vector of a's width, which is added to every row.
	"""
	if a.shape != b.shape and not (a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]) :
		raise DimensionError('add operands must share a shape or add a row vector', a.shape, b.shape)

	tally(Category(category), a.size, role)
	return _apply('add', (a, b))


def relu(a: Tensor) -> Tensor :
	return _apply('relu', (a,))


def scale(a: Tensor, factor: float) -> Tensor :
	return _apply('scale', (a,), factor=float(factor))


def transpose(a: Tensor) -> Tensor :
	_require_rank('transpose', a, 2)
	return _apply('transpose', (a,))


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor :
	"""
	row-wise softmax with max-subtraction. where `mask` is given, False entries get weight
	exactly zero; every row must keep at least one entry.
	"""
	_require_rank('softmax_rows', x, 2)

	if mask is not None :
		mask = np.array(mask, dtype=bool)

		if mask.shape != x.shape :
			raise DimensionError('softmax mask must match the input shape', mask.shape, x.shape)

		if not mask.any(axis=1).all() :
			raise DimensionError('softmax mask leaves a row with no entries', mask.shape)

		mask.setflags(write=False)

	return _apply('softmax_rows', (x,), mask=mask)


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor :
	_require_rank('layer_norm_rows', x, 2)
	n: int = x.shape[1]

	if n < 2 :
		raise DimensionError('layer norm needs rows of at least two entries', x.shape)

	if gamma.shape != (n,) or beta.shape != (n,) :
		raise DimensionError('layer norm gamma and beta must match the row width', x.shape, gamma.shape, beta.shape)

	if not eps > 0 :
		raise ConfigError(f'layer norm eps must be positive, got {eps}')

	return _apply('layer_norm_rows', (x, gamma, beta), eps=float(eps))


def mean_pool_strided(x: Tensor, r: int) -> Tensor :
	_require_rank('mean_pool_strided', x, 2)

	if r < 1 or x.shape[0] % r :
		raise DimensionError(f'sequence length is not divisible by the pooling ratio {r}', x.shape)

	tally(Category.pooling, x.size, 'pool')
	return _apply('mean_pool_strided', (x,), r=int(r))


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor :
	_require_rank('slice_columns', a, 2)

	if not 0 <= start < stop <= a.shape[1] :
		raise DimensionError(f'column range [{start}, {stop}) is outside the tensor', a.shape)

	return _apply('slice_columns', (a,), start=int(start), stop=int(stop))


def concat_columns(tensors: Sequence[Tensor]) -> Tensor :
	if not tensors :
		raise DimensionError('nothing to concatenate')

	for t in tensors :
		_require_rank('concat_columns', t, 2)

	if len({ t.shape[0] for t in tensors }) != 1 :
		raise DimensionError('concatenated tensors must share a row count', *(t.shape for t in tensors))

	return _apply('concat_columns', tuple(tensors))


def sum_all(a: Tensor) -> Tensor :
	return _apply('sum_all', (a,))


def vjp(op: str, inputs: Sequence[Tensor], upstream: Tensor, **attrs: Any) -> Tuple[Tensor, ...] :
	"""
	vector-Jacobian product of a primitive: the gradient of <upstream, op(*inputs)> with
	respect to each input. nothing is counted.
	"""
	if op not in _adjoints or op not in _forwards :
		raise UnsupportedOperation(f'no adjoint rule for operation "{op}"')

	arrays: Tuple[np.ndarray, ...] = tuple(t.array for t in inputs)
	output: np.ndarray = np.atleast_1d(_forwards[op](*arrays, **attrs))

	if output.shape != upstream.shape :
		raise DimensionError(f'upstream gradient of {op} must match its output shape', upstream.shape, output.shape)

	return tuple(map(Tensor.wrap, _adjoints[op](arrays, output, upstream.array, **attrs)))
