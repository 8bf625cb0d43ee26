from concurrent.futures import Future, ThreadPoolExecutor
from contextvars import copy_context
from functools import lru_cache
from logging import Logger, getLogger
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, confloat, conint, root_validator

from sectionalmoe.blocks import LayerDims, LayerParams, init_layer, layer_param_count, transformer_layer
from sectionalmoe.errors import ConfigError, DimensionError
from sectionalmoe.models import Params, Strict
from sectionalmoe.tensor import Category, Tensor, concat_columns, mean_pool_strided, slice_columns, stage, tallied_as


logger: Logger = getLogger('sectionalmoe.sectional')

PRE_STAGE: str = 'pre'
EXPERT_STAGE: str = 'experts'
AGGREGATION_STAGE: str = 'aggregation'


class SectionalConfig(Strict) :
	"""
	L is the per-expert token count, so the model input is E*L tokens of width d0. r is the
	sequence reduction ratio applied after the pre-expert layer; it defaults to E**2, which
	hands every expert L/E tokens. d_ff_* are multipliers of the width of the block they feed.
	"""
	L: conint(ge=1)
	E: conint(ge=1)
	d0: conint(ge=2)
	h_pre: conint(ge=1) = 1
	h_exp: conint(ge=1) = 1
	r: Optional[conint(ge=1)] = None
	d_ff_pre: conint(ge=1) = 2
	d_ff_exp: conint(ge=1) = 2
	d_ff_agg: conint(ge=1) = 2
	seed: int = 0
	causal: bool = False
	scale_by_sqrt_dh: bool = True
	parallel_experts: bool = False
	eps: confloat(gt=0) = 1e-5

	@root_validator(skip_on_failure=True)
	def check_divisibility(cls, values: dict) -> dict :
		L, E, d0 = values['L'], values['E'], values['d0']

		if values['r'] is None :
			values['r'] = E * E

		r: int = values['r']

		assert d0 % E == 0, f'd0 {d0} is not divisible by E {E}'
		assert d0 // E >= 2, f'expert slices must be at least two wide, d0/E is {d0 // E}'
		assert d0 % values['h_pre'] == 0, f'd0 {d0} is not divisible by h_pre {values["h_pre"]}'
		assert (d0 // E) % values['h_exp'] == 0, f'slice width {d0 // E} is not divisible by h_exp {values["h_exp"]}'
		assert (E * L) % r == 0, f'E*L = {E * L} tokens cannot be reduced by r = {r}'
		return values

	@property
	def tokens(self: 'SectionalConfig') -> int :
		return self.E * self.L

	@property
	def d_slice(self: 'SectionalConfig') -> int :
		return self.d0 // self.E

	@property
	def l_reduced(self: 'SectionalConfig') -> int :
		return self.tokens // self.r

	@property
	def on_model(self: 'SectionalConfig') -> bool :
		return self.r == self.E * self.E

	def pre_dims(self: 'SectionalConfig') -> LayerDims :
		return LayerDims(d_model=self.d0, heads=self.h_pre, d_ff=self.d_ff_pre * self.d0)

	def expert_dims(self: 'SectionalConfig') -> LayerDims :
		return LayerDims(d_model=self.d_slice, heads=self.h_exp, d_ff=self.d_ff_exp * self.d_slice)

	def aggregation_dims(self: 'SectionalConfig') -> LayerDims :
		return LayerDims(d_model=self.d0, heads=self.h_pre, d_ff=self.d_ff_agg * self.d0)


class SectionalParams(Params) :
	pre_layer: LayerParams
	expert_layers: List[LayerParams]
	agg_layer: LayerParams

	@root_validator(skip_on_failure=True)
	def check_widths(cls, values: dict) -> dict :
		experts: List[LayerParams] = values['expert_layers']
		d0: int = values['pre_layer'].d_model

		assert experts, 'at least one expert layer is required'
		assert values['agg_layer'].d_model == d0, 'the aggregation layer must match the pre-expert width'
		assert all(e.d_model * len(experts) == d0 for e in experts), f'every expert layer must be {d0}/{len(experts)} wide'
		return values


class ParamCount(BaseModel) :
	pre: int
	per_expert: int
	experts: int
	expert_attention: int
	aggregation: int
	total: int


def init_sectional(cfg: SectionalConfig) -> SectionalParams :
	"""
	each layer draws from its own child of SeedSequence(cfg.seed), so the expert layers do not
	depend on how many experts precede them in the draw order.
	"""
	pre, agg, *experts = map(np.random.default_rng, np.random.SeedSequence(cfg.seed).spawn(cfg.E + 2))

	return SectionalParams(
		pre_layer=init_layer(cfg.pre_dims(), pre),
		expert_layers=[init_layer(cfg.expert_dims(), rng) for rng in experts],
		agg_layer=init_layer(cfg.aggregation_dims(), agg),
	)


def pre_expert_block(x: Tensor, params: SectionalParams, cfg: SectionalConfig) -> Tensor :
	"""
	full self-attention layer over all E*L tokens, then strided mean pooling by cfg.r.
	"""
	if x.shape != (cfg.tokens, cfg.d0) :
		raise ConfigError(f'pre-expert input must be ({cfg.tokens}, {cfg.d0}) for E={cfg.E}, L={cfg.L}, got {x.shape}')

	with stage(PRE_STAGE) :
		y: Tensor = transformer_layer(x, params.pre_layer, cfg.causal, cfg.scale_by_sqrt_dh)
		return mean_pool_strided(y, cfg.r)


def split_embedding(z: Tensor, E: int) -> List[Tensor] :
	if z.ndim != 2 or E < 1 or z.shape[1] % E :
		raise ConfigError(f'cannot split an embedding of shape {z.shape} into {E} equal slices')

	width: int = z.shape[1] // E
	return [slice_columns(z, i * width, (i + 1) * width) for i in range(E)]


def expert_block_forward(x: Tensor, layer: LayerParams, causal: bool = False, scale_by_sqrt_dh: bool = True) -> Tensor :
	return transformer_layer(x, layer, causal, scale_by_sqrt_dh)


def _run_expert(index: int, x: Tensor, layer: LayerParams, cfg: SectionalConfig) -> Tensor :
	with stage(f'{EXPERT_STAGE}:{index}') :
		return expert_block_forward(x, layer, cfg.causal, cfg.scale_by_sqrt_dh)


def run_experts(slices: List[Tensor], params: SectionalParams, cfg: SectionalConfig) -> List[Tensor] :
	if len(slices) != len(params.expert_layers) :
		raise ConfigError(f'{len(slices)} slices for {len(params.expert_layers)} experts')

	if not cfg.parallel_experts or len(slices) == 1 :
		return [_run_expert(i, s, layer, cfg) for i, (s, layer) in enumerate(zip(slices, params.expert_layers))]

	# each task runs in its own copy of the caller's context so counters, tapes and stages follow it
	with ThreadPoolExecutor(max_workers=len(slices), thread_name_prefix='expert') as pool :
		futures: List[Future] = [
			pool.submit(copy_context().run, _run_expert, i, s, layer, cfg)
			for i, (s, layer) in enumerate(zip(slices, params.expert_layers))
		]
		return [f.result() for f in futures]


def aggregate(slices: List[Tensor], agg: LayerParams, causal: bool = False, scale_by_sqrt_dh: bool = True) -> Tensor :
	"""
	concatenates the expert outputs back to full width and mixes them with one transformer
	layer. everything the layer computes is tallied under the aggregation category.
	"""
	if not slices or len({ s.shape for s in slices }) != 1 :
		raise DimensionError('expert outputs must share one shape', *(s.shape for s in slices))

	z: Tensor = concat_columns(slices)

	with stage(AGGREGATION_STAGE), tallied_as(Category.aggregation) :
		return transformer_layer(z, agg, causal, scale_by_sqrt_dh)


@lru_cache(maxsize=None)
def warn_off_model(r: int, E: int) -> None :
	"""
	logs once per (r, E) pair.
	"""
	logger.warning('running off-model reduction ratio r=%d (E^2 = %d)', r, E * E)


def sectional_forward(x: Tensor, params: SectionalParams, cfg: SectionalConfig) -> Tensor :
	if not cfg.on_model :
		warn_off_model(cfg.r, cfg.E)

	z: Tensor = pre_expert_block(x, params, cfg)
	logger.debug('pre-expert block reduced %d tokens to %d', cfg.tokens, cfg.l_reduced)
	outputs: List[Tensor] = run_experts(split_embedding(z, cfg.E), params, cfg)
	return aggregate(outputs, params.agg_layer, cfg.causal, cfg.scale_by_sqrt_dh)


def param_count(cfg: SectionalConfig) -> ParamCount :
	pre: int = layer_param_count(cfg.d0, cfg.d_ff_pre * cfg.d0)
	per_expert: int = layer_param_count(cfg.d_slice, cfg.d_ff_exp * cfg.d_slice)
	aggregation: int = layer_param_count(cfg.d0, cfg.d_ff_agg * cfg.d0)

	return ParamCount(
		pre=pre,
		per_expert=per_expert,
		experts=cfg.E * per_expert,
		expert_attention=4 * cfg.d_slice * cfg.d_slice,
		aggregation=aggregation,
		total=pre + cfg.E * per_expert + aggregation,
	)
