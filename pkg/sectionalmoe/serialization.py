from io import BytesIO
from typing import Any, Generator, Iterable, List, Mapping, Optional, Type, Union

import ujson
from avro.errors import AvroException, AvroTypeException
from avro.io import BinaryDecoder, BinaryEncoder, DatumReader, DatumWriter
from avro.schema import RecordSchema, Schema
from avro.schema import parse as parse_avro_schema
from pydantic import BaseModel, parse_obj_as

from sectionalmoe.schema import convert_schema


def avro_frame(bytes_to_frame: Optional[bytes] = None) -> bytes :
	if bytes_to_frame :
		return len(bytes_to_frame).to_bytes(4, 'big') + bytes_to_frame

	return b'\x00\x00\x00\x00'


def read_avro_frames(avro_bytes: bytes) -> Generator[bytes, None, None] :
	while avro_bytes :
		frame_len = int.from_bytes(avro_bytes[:4], 'big') + 4
		yield avro_bytes[4:frame_len]
		avro_bytes = avro_bytes[frame_len:]


def schema_json(model: Type[BaseModel]) -> str :
	return ujson.dumps(convert_schema(model), indent=2)


class ReportWriter(DatumWriter) :
	"""
	dispatches on the writer's schema type directly instead of walking avro's validation
	path. report rows are records of the primitive types below.
	"""

	@staticmethod
	def _writer_type_bool_(writers_schema: Schema, datum: bool, encoder: BinaryEncoder) -> None :
		if isinstance(datum, bool) :
			return encoder.write_boolean(datum)
		raise AvroTypeException(writers_schema, datum)


	@staticmethod
	def _writer_type_str_(writers_schema: Schema, datum: str, encoder: BinaryEncoder) -> None :
		if isinstance(datum, str) :
			return encoder.write_utf8(datum)
		raise AvroTypeException(writers_schema, datum)


	@staticmethod
	def _writer_type_long_(writers_schema: Schema, datum: int, encoder: BinaryEncoder) -> None :
		if isinstance(datum, int) and not isinstance(datum, bool) :
			return encoder.write_long(datum)
		raise AvroTypeException(writers_schema, datum)


	@staticmethod
	def _writer_type_double_(writers_schema: Schema, datum: Union[int, float], encoder: BinaryEncoder) -> None :
		if isinstance(datum, (int, float)) and not isinstance(datum, bool) :
			return encoder.write_double(datum)
		raise AvroTypeException(writers_schema, datum)


	def _writer_type_record_(self, writers_schema: RecordSchema, datum: dict, encoder: BinaryEncoder) -> None :
		if isinstance(datum, Mapping) :
			return self.write_record(writers_schema, datum, encoder)
		raise AvroTypeException(writers_schema, datum)


	_writer_type_map_ = {
		'boolean': _writer_type_bool_,
		'string': _writer_type_str_,
		'long': _writer_type_long_,
		'double': _writer_type_double_,
	}


	def write_data(self, writers_schema: Schema, datum: Any, encoder: BinaryEncoder) -> None :
		if writers_schema.type in self._writer_type_map_ :
			return self._writer_type_map_[writers_schema.type](writers_schema, datum, encoder)

		if isinstance(writers_schema, RecordSchema) :
			return self._writer_type_record_(writers_schema, datum, encoder)

		raise AvroException(f'Unknown type: {writers_schema.type}')


class AvroSerializer :

	def __init__(self, model: Type[BaseModel]) :
		self._model: Type[BaseModel] = model
		self._writer: ReportWriter = ReportWriter(parse_avro_schema(ujson.dumps(convert_schema(model))))


	def __call__(self, data: BaseModel) -> bytes :
		if not isinstance(data, self._model) :
			raise NotImplementedError(f'unable to convert "{type(data)}" for encoding as {self._model.__name__}')

		io_object: BytesIO = BytesIO()
		encoder: BinaryEncoder = BinaryEncoder(io_object)
		self._writer.write_data(self._writer.writers_schema, data.dict(), encoder)
		return io_object.getvalue()


class AvroDeserializer[T: BaseModel] :

	def __init__(self, model: Type[T]) :
		schema: Schema = parse_avro_schema(ujson.dumps(convert_schema(model)))
		self._model: Type[T] = model
		self._reader: DatumReader = DatumReader(schema, schema)


	def __call__(self, data: bytes) -> T :
		return parse_obj_as(self._model, self._reader.read(BinaryDecoder(BytesIO(data))))


def encode_rows(rows: Iterable[BaseModel], model: Type[BaseModel]) -> bytes :
	"""
	every row as one length-prefixed avro frame, followed by an empty frame marking the end.
	"""
	serializer: AvroSerializer = AvroSerializer(model)
	return b''.join(avro_frame(serializer(row)) for row in rows) + avro_frame()


def decode_rows[T: BaseModel](data: bytes, model: Type[T]) -> List[T] :
	deserializer: AvroDeserializer[T] = AvroDeserializer(model)
	return [deserializer(frame) for frame in read_avro_frames(data) if frame]
