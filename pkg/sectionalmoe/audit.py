from csv import writer as csv_writer
from io import StringIO
from logging import Logger, getLogger
from typing import List, Optional, Union

from pydantic import BaseModel, root_validator

from sectionalmoe.blocks import QKV_ROLES, sample_input
from sectionalmoe.cost import Convention, ModelDims, sectional_attn_costs, sectional_qkv_costs, traditional_costs
from sectionalmoe.errors import ConfigError, OffModelError
from sectionalmoe.sectional import AGGREGATION_STAGE, EXPERT_STAGE, PRE_STAGE, SectionalConfig, init_sectional, sectional_forward
from sectionalmoe.tensor import Category, OpCounter, counting
from sectionalmoe.traditional import dispatch_combine, init_traditional, uniform_assignment


logger: Logger = getLogger('sectionalmoe.audit')

CSV_HEADER: List[str] = ['equation', 'predicted', 'measured', 'match', 'note']

_QKV_NOTE: str = 'q, k and v projections only; the output projection is reported separately'
_INFO_NOTE: str = 'outside the cost model; informational'


class AuditRow(BaseModel) :
	equation: str
	predicted: int
	measured: int
	match: bool
	required: bool
	note: str = ''


class AuditReport(BaseModel) :
	architecture: str
	convention: Convention
	rows: List[AuditRow]
	passed: bool

	@root_validator(skip_on_failure=True)
	def check_verdict(cls, values: dict) -> dict :
		required: List[AuditRow] = [row for row in values['rows'] if row.required]
		assert all(row.match == (row.predicted == row.measured) for row in required), 'required rows demand exact equality'
		assert values['passed'] == all(row.match for row in required), 'the verdict must be the conjunction of the required rows'
		return values


def _count(value: Union[int, float], label: str) -> int :
	rounded: int = round(value)

	if abs(value - rounded) > 1e-9 * max(1.0, abs(value)) :
		raise ConfigError(f'{label} predicts a fractional count {value}; choose dimensions where it divides evenly')

	return rounded


def _row(equation: str, predicted: Union[int, float], measured: int, required: bool = True, note: str = '') -> AuditRow :
	count: int = _count(predicted, equation)
	return AuditRow(equation=equation, predicted=count, measured=measured, match=count == measured, required=required, note=note)


def _layer_macs(tokens: int, d: int, d_ff: int) -> int :
	# every tally one pre-norm layer makes at this shape: projections, scores and values, ffn, bias and residual adds
	return 4 * tokens * d * d + 2 * tokens * tokens * d + 2 * tokens * d * d_ff + tokens * d_ff + 3 * tokens * d


def _report(architecture: str, convention: Convention, rows: List[AuditRow]) -> AuditReport :
	passed: bool = all(row.match for row in rows if row.required)

	for row in rows :
		if row.required and not row.match :
			logger.warning('%s audit: %s predicted %d, measured %d', architecture, row.equation, row.predicted, row.measured)

	return AuditReport(architecture=architecture, convention=convention, rows=rows, passed=passed)


def audit_sectional(cfg: SectionalConfig, dims: Optional[ModelDims] = None) -> AuditReport :
	"""
	runs one instrumented sectional forward pass and checks the measured projection and
	attention counts of the pre-expert block and of all experts against the cost model.
	"""
	if not cfg.on_model :
		raise OffModelError(
			f'the cost model assumes a reduction ratio of E^2 = {cfg.E * cfg.E}, so the audit refuses r = {cfg.r}; '
			'other ratios are supported by the forward pass but have no analytic counterpart',
		)

	if dims is None :
		dims = ModelDims(L=cfg.L, E=cfg.E, d0=cfg.d0, h_pre=cfg.h_pre, h_exp=cfg.h_exp)

	elif (dims.L, dims.E, dims.d0) != (cfg.L, cfg.E, cfg.d0) :
		raise ConfigError(f'dims (L={dims.L}, E={dims.E}, d0={dims.d0}) do not mirror the sectional config (L={cfg.L}, E={cfg.E}, d0={cfg.d0})')

	params = init_sectional(cfg)

	with counting() as counter :
		sectional_forward(sample_input(cfg.tokens, cfg.d0, cfg.seed), params, cfg)

	return _sectional_rows(cfg, dims, counter)


def _sectional_rows(cfg: SectionalConfig, dims: ModelDims, counter: OpCounter) -> AuditReport :
	a_pre, a_experts, _ = sectional_qkv_costs(dims)
	r_pre_printed, r_experts, _ = sectional_attn_costs(dims)
	T, E, d0, w = cfg.tokens, cfg.E, cfg.d0, cfg.d_slice
	lr: int = cfg.l_reduced
	pre_attention: int = counter.count(Category.attn_scores, PRE_STAGE)

	rows: List[AuditRow] = [
		_row('pre qkv', a_pre, counter.count(Category.qkv, PRE_STAGE, QKV_ROLES), note=_QKV_NOTE),
		_row('experts qkv', a_experts, counter.count(Category.qkv, EXPERT_STAGE, QKV_ROLES), note=_QKV_NOTE),
		_row('pre attention', 2 * T * T * d0, pre_attention, note='full attention over all E*L tokens: 2*(E*L)^2*d0'),
		_row('experts attention', r_experts, counter.count(Category.attn_scores, EXPERT_STAGE)),
		_row(
			'pre attention (printed simplification)',
			r_pre_printed,
			pre_attention,
			required=False,
			note='the printed 2*E*L^2*d0 form used inside S(E); equals the full count only at E=1',
		),
		_row('pre output projection', T * d0 * d0, counter.count(Category.qkv, PRE_STAGE, ['out_proj']), False, _INFO_NOTE),
		_row('experts output projection', E * lr * w * w, counter.count(Category.qkv, EXPERT_STAGE, ['out_proj']), False, _INFO_NOTE),
		_row('pooling', T * d0, counter.count(Category.pooling), False, _INFO_NOTE),
		_row(
			'ffn',
			2 * T * d0 * cfg.d_ff_pre * d0 + E * 2 * lr * w * cfg.d_ff_exp * w,
			counter.count(Category.ffn),
			False,
			_INFO_NOTE,
		),
		_row('aggregation', _layer_macs(lr, d0, cfg.d_ff_agg * d0), counter.count(Category.aggregation, AGGREGATION_STAGE), False, _INFO_NOTE),
	]

	return _report('sectional', dims.convention, rows)


def audit_traditional(dims: ModelDims, tokens: Optional[int] = None, seed: int = 0, heads: int = 1) -> AuditReport :
	"""
	forces every expert to receive the same contiguous block of tokens, runs full attention
	blocks as experts, and checks the totals over all experts. the attention row is required
	under the consistent convention; the paper_literal total is reported next to it.
	"""
	E: int = round(dims.E)

	if E != dims.E :
		raise ConfigError(f'the traditional audit needs an integer expert count, got {dims.E}')

	tokens = E * dims.L if tokens is None else tokens
	assignment = uniform_assignment(tokens, E)
	per_expert: ModelDims = dims.copy(update={ 'L': tokens // E })

	params = init_traditional(dims.d0, E, dims.d0, seed, attention_experts=True, heads=heads)

	with counting() as counter :
		dispatch_combine(sample_input(tokens, dims.d0, seed), assignment, params.experts)

	a_trad, r_consistent = traditional_costs(per_expert.copy(update={ 'convention': Convention.consistent }))
	_, r_literal = traditional_costs(per_expert.copy(update={ 'convention': Convention.paper_literal }))
	attention: int = counter.count(Category.attn_scores, EXPERT_STAGE)

	rows: List[AuditRow] = [
		_row('traditional qkv', a_trad, counter.count(Category.qkv, EXPERT_STAGE, QKV_ROLES), note=_QKV_NOTE),
		_row('traditional attention (consistent)', r_consistent, attention, note='both score steps: QK^T and the weighted sum of values'),
		_row('traditional attention (paper_literal)', r_literal, attention, required=False, note='printed single-step form'),
		_row('traditional output projection', tokens * dims.d0 * dims.d0, counter.count(Category.qkv, EXPERT_STAGE, ['out_proj']), False, _INFO_NOTE),
	]

	return _report('traditional', dims.convention, rows)


def render_text(report: AuditReport) -> str :
	table: List[List[str]] = [['equation', 'predicted', 'measured', 'match', 'required']] + [
		[row.equation, str(row.predicted), str(row.measured), 'yes' if row.match else 'NO', 'required' if row.required else 'info']
		for row in report.rows
	]
	widths: List[int] = [max(len(line[i]) for line in table) for i in range(len(table[0]))]
	lines: List[str] = [f'{report.architecture} audit, convention {report.convention.value}']
	lines += ['  '.join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in table]
	lines += [f'  {row.equation}: {row.note}' for row in report.rows if row.note]
	lines.append('PASS' if report.passed else 'FAIL')
	return '\n'.join(lines) + '\n'


def render_csv(*reports: AuditReport) -> str :
	buffer: StringIO = StringIO()
	out = csv_writer(buffer, lineterminator='\n')
	out.writerow(CSV_HEADER)

	for report in reports :
		for row in report.rows :
			out.writerow([row.equation, row.predicted, row.measured, str(row.match).lower(), row.note])

	return buffer.getvalue()
