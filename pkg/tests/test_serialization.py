from io import BytesIO
from typing import List

import pytest
import ujson
from avro.errors import AvroException, AvroTypeException
from avro.io import BinaryEncoder
from avro.schema import parse as parse_avro_schema
from pydantic import BaseModel
from pytest import raises

from sectionalmoe.audit import AuditRow
from sectionalmoe.cost import CostRow, ModelDims, cost_row
from sectionalmoe.serialization import AvroDeserializer, AvroSerializer, ReportWriter, avro_frame, decode_rows, encode_rows, read_avro_frames, schema_json


@pytest.mark.parametrize(
	'input_model', [
		AuditRow(equation='pre qkv', predicted=1536, measured=1536, match=True, required=True, note='q, k and v projections only'),
		cost_row(ModelDims(L=2, E=2, d0=4, alpha=1)),
		AuditRow(equation='expert attention', predicted=0, measured=-3, match=False, required=False),
		cost_row(ModelDims(L=64, E=7, d0=512, alpha=0.5)),
	],
)
def test_serialize_ValidInput_ModelEncodedAndDecodedSuccessfully(input_model: BaseModel) :

	# arrange
	serializer: AvroSerializer = AvroSerializer(type(input_model))
	deserializer: AvroDeserializer = AvroDeserializer(type(input_model))

	# act
	result = deserializer(serializer(input_model))

	# assert
	assert result == input_model


def test_serialize_WrongModel_SerializerThrowsError() :

	# arrange
	serializer: AvroSerializer = AvroSerializer(AuditRow)

	# assert
	with raises(NotImplementedError) :
		serializer(cost_row(ModelDims(L=2, E=2, d0=4, alpha=1)))


def test_serialize_UnvalidatedWrongFieldType_WriterThrowsError() :

	# arrange
	row: AuditRow = AuditRow.construct(equation=5, predicted=1, measured=1, match=True, required=True, note='')

	# assert
	with raises(AvroTypeException) :
		AvroSerializer(AuditRow)(row)


def test_ReportWriter_UnmappedPrimitive_WriterThrowsError() :

	# arrange
	writer: ReportWriter = ReportWriter(parse_avro_schema('"int"'))

	# assert
	with raises(AvroException) :
		writer.write_data(writer.writers_schema, 1, BinaryEncoder(BytesIO()))


def test_AvroFrame_Bytes_LengthPrefixed() :

	# assert
	assert avro_frame(b'abc') == b'\x00\x00\x00\x03abc'
	assert avro_frame() == b'\x00\x00\x00\x00'
	assert avro_frame(b'') == b'\x00\x00\x00\x00'


def test_ReadAvroFrames_ConcatenatedFrames_SplitInOrder() :

	# arrange
	data: bytes = avro_frame(b'abc') + avro_frame(b'de') + avro_frame()

	# act
	frames: List[bytes] = list(read_avro_frames(data))

	# assert
	assert frames == [b'abc', b'de', b'']


def test_EncodeRows_CostSweep_DecodesToSameRows() :

	# arrange
	rows: List[CostRow] = [cost_row(ModelDims(L=2, E=E, d0=4, alpha=1)) for E in (1, 2, 3)]

	# act
	data: bytes = encode_rows(rows, CostRow)

	# assert
	assert data.endswith(avro_frame())
	assert decode_rows(data, CostRow) == rows


def test_EncodeRows_NoRows_OnlyTerminator() :

	# act
	data: bytes = encode_rows([], AuditRow)

	# assert
	assert data == avro_frame()
	assert decode_rows(data, AuditRow) == []


def test_SchemaJson_AuditRow_ParsesAsRecord() :

	# act
	text: str = schema_json(AuditRow)

	# assert
	assert ujson.loads(text)['name'] == 'AuditRow'
	assert ujson.loads(text)['namespace'] == 'sectionalmoe.reports'
