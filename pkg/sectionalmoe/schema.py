from re import Pattern
from re import compile as re_compile
from typing import Any, Dict, Mapping, Self, Type, Union

from avro.errors import AvroException
from pydantic import BaseModel
from pydantic.fields import ModelField


AvroSchema = Union[str, Mapping[str, Any]]

NAMESPACE: str = 'sectionalmoe.reports'
_avro_name_format: Pattern = re_compile(r'^[A-Za-z_][A-Za-z0-9_]*$')


def convert_schema(model: Type[BaseModel], namespace: str = NAMESPACE) -> AvroSchema :
	return ReportSchemaGenerator(model, namespace).schema()


def _validate_avro_name(name: str) -> str :
	if _avro_name_format.match(name) is None :
		raise AvroException(f'{name} does not match the avro name format: names must start with [A-Za-z_] and subsequently contain only [A-Za-z0-9_]')

	return name


class ReportSchemaGenerator :
	"""
	builds the avro record schema of a flat report model, a cost sweep row or an audit row.
	every field must hold one of the scalar types in the conversion map.
	"""

	_conversions_: Dict[type, str] = {
		bool: 'boolean',
		int: 'long',
		float: 'double',
		str: 'string',
	}


	def __init__(self: Self, model: Type[BaseModel], namespace: str = NAMESPACE) -> None :
		self.model: Type[BaseModel] = model
		self.name: str = _validate_avro_name(model.__name__)
		self.namespace: str = namespace


	def schema(self: Self) -> AvroSchema :
		return {
			'type': 'record',
			'name': self.name,
			'namespace': self.namespace,
			'fields': [self._convert_field(name, field) for name, field in self.model.__fields__.items()],
		}


	def _convert_field(self: Self, name: str, field: ModelField) -> Dict[str, Any] :
		if field.allow_none :
			raise NotImplementedError(f'{self.name}.{name} is optional; report columns always hold a value')

		f: Dict[str, Any] = {
			'name': _validate_avro_name(name),
			'type': self._get_type(field.outer_type_),
		}

		if not field.required :
			f['default'] = field.default

		return f


	def _get_type(self: Self, model: type) -> str :
		# exact lookup, so bool never falls through to long
		if model in self._conversions_ :
			return self._conversions_[model]

		raise NotImplementedError(f'{model} missing from conversion map.')
