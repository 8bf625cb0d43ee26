from enum import Enum
from logging import Logger, getLogger
from typing import Any, Dict, Optional

import yaml
from pydantic import confloat, conint, root_validator

from sectionalmoe.cost import E_LIMIT, Convention, ModelDims
from sectionalmoe.errors import ConfigError
from sectionalmoe.models import Strict
from sectionalmoe.sectional import SectionalConfig


logger: Logger = getLogger('sectionalmoe.config')


class Format(Enum) :
	csv = 'csv'
	avro = 'avro'


class DimsSection(Strict) :
	L: conint(ge=1) = 2
	E: conint(ge=1) = 2
	e_min: conint(ge=1, le=E_LIMIT) = 1
	e_max: conint(ge=1, le=E_LIMIT) = 16
	d0: conint(ge=2) = 8
	h_pre: conint(ge=1) = 1
	h_exp: conint(ge=1) = 1
	alpha: confloat(ge=0) = 1.0
	convention: Convention = Convention.consistent

	@root_validator(skip_on_failure=True)
	def check_range(cls, values: dict) -> dict :
		assert values['e_min'] <= values['e_max'], f'e_min {values["e_min"]} exceeds e_max {values["e_max"]}'
		return values


class ModelSection(Strict) :
	r: Optional[conint(ge=1)] = None
	d_ff_pre: conint(ge=1) = 2
	d_ff_exp: conint(ge=1) = 2
	d_ff_agg: conint(ge=1) = 2
	k: conint(ge=1) = 1
	capacity_factor: confloat(gt=0) = 1.25
	causal: bool = False
	scale_by_sqrt_dh: bool = True
	parallel_experts: bool = False


class RunSection(Strict) :
	seed: int = 0
	out: Optional[str] = None
	format: Format = Format.csv


class RunConfig(Strict) :
	"""
	the three sections of a run file. every section is optional and falls back to the toy
	defaults: E=2, L=2, d0=8, alpha=1, seed 0.
	"""
	dims: DimsSection = DimsSection()
	model: ModelSection = ModelSection()
	run: RunSection = RunSection()

	@root_validator(skip_on_failure=True)
	def check_model(cls, values: dict) -> dict :
		dims: DimsSection = values['dims']
		k: int = values['model'].k
		assert k <= dims.E, f'k {k} exceeds the {dims.E} experts'
		return values

	def sectional(self: 'RunConfig') -> SectionalConfig :
		return SectionalConfig.create(
			L=self.dims.L,
			E=self.dims.E,
			d0=self.dims.d0,
			h_pre=self.dims.h_pre,
			h_exp=self.dims.h_exp,
			r=self.model.r,
			d_ff_pre=self.model.d_ff_pre,
			d_ff_exp=self.model.d_ff_exp,
			d_ff_agg=self.model.d_ff_agg,
			seed=self.run.seed,
			causal=self.model.causal,
			scale_by_sqrt_dh=self.model.scale_by_sqrt_dh,
			parallel_experts=self.model.parallel_experts,
		)

	def model_dims(self: 'RunConfig', E: Optional[float] = None) -> ModelDims :
		return ModelDims.create(
			L=self.dims.L,
			E=self.dims.E if E is None else E,
			d0=self.dims.d0,
			h_pre=self.dims.h_pre,
			h_exp=self.dims.h_exp,
			alpha=self.dims.alpha,
			r=self.model.r,
			convention=self.dims.convention,
		)

	def override(
		self: 'RunConfig',
		seed: Optional[int] = None,
		e_min: Optional[int] = None,
		e_max: Optional[int] = None,
		out: Optional[str] = None,
		format: Optional[str] = None,
	) -> 'RunConfig' :
		"""
		applies command line flags on top of the file. unset flags keep the file's values and the
		result is validated again.
		"""
		data: Dict[str, Dict[str, Any]] = {
			'dims': self.dims.dict(),
			'model': self.model.dict(),
			'run': self.run.dict(),
		}

		for section, key, value in (
			('run', 'seed', seed),
			('dims', 'e_min', e_min),
			('dims', 'e_max', e_max),
			('run', 'out', out),
			('run', 'format', format),
		) :
			if value is not None :
				data[section][key] = value

		return RunConfig.create(**data)


def load_config(path: Optional[str] = None) -> RunConfig :
	if path is None :
		return RunConfig()

	with open(path, encoding='utf-8') as file :
		try :
			data: Any = yaml.safe_load(file)

		except yaml.YAMLError as e :
			raise ConfigError(f'{path} is not valid YAML: {e}') from e

		except UnicodeDecodeError as e :
			raise ConfigError(f'{path} is not UTF-8 text: {e}') from e

	if data is None :
		data = { }

	if not isinstance(data, dict) :
		raise ConfigError(f'{path} must hold a mapping with the sections dims, model and run')

	logger.debug('loaded %s with sections %s', path, sorted(data))
	return RunConfig.create(**data)
