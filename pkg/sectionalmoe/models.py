from typing import Any, Type, TypeVar

from pydantic import BaseModel, Extra, ValidationError

from sectionalmoe.errors import ConfigError


T = TypeVar('T', bound='Strict')


class Strict(BaseModel) :
	"""
	base for configuration models: unknown keys are rejected and validation failures surface
	as ConfigError through `create`.
	"""

	class Config :
		extra = Extra.forbid
		allow_mutation = False

	@classmethod
	def create(cls: Type[T], **values: Any) -> T :
		try :
			return cls(**values)

		except ValidationError as e :
			raise ConfigError(f'invalid {cls.__name__}: {e}') from e


class Params(BaseModel) :
	"""
	immutable parameter container. fields hold Tensors, so arbitrary types are allowed.
	"""

	class Config :
		arbitrary_types_allowed = True
		smart_union = True
		allow_mutation = False
