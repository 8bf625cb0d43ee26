import logging
import sys
from argparse import ArgumentParser, Namespace
from csv import writer as csv_writer
from io import StringIO
from logging import Logger, getLogger
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from sectionalmoe import __version__
from sectionalmoe.audit import AuditReport, AuditRow, audit_sectional, audit_traditional, render_csv, render_text
from sectionalmoe.blocks import GradCheckReport, LayerDims, grad_check, init_params, param_total, sample_input, transformer_layer
from sectionalmoe.config import Format, RunConfig, load_config
from sectionalmoe.cost import CostRow, ModelDims, OptResult, cost_row, flag_off_model, optimize_experts, validate_range
from sectionalmoe.errors import ConfigError, EvaluationError
from sectionalmoe.sectional import SectionalConfig, SectionalParams, init_sectional, param_count, sectional_forward
from sectionalmoe.serialization import encode_rows, schema_json
from sectionalmoe.tensor import OpCounter, Tensor, counting, sum_all
from sectionalmoe.traditional import RoutingStats, TraditionalParams, apply_capacity, dispatch_combine, gate, init_traditional, mean_similarity, routing_stats


logger: Logger = getLogger('sectionalmoe.cli')

COST_HEADER: List[str] = list(CostRow.__fields__)
GRADCHECK_TOL: float = 1e-4

EXIT_OK: int = 0
EXIT_CHECK_FAILED: int = 1
EXIT_CONFIG: int = 2


def number(value: Any) -> str :
	"""
	17 significant digits, enough to round-trip any 64-bit float.
	"""
	return format(value, '.17g') if isinstance(value, float) else str(value)


def _csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str :
	buffer: StringIO = StringIO()
	out = csv_writer(buffer, lineterminator='\n')
	out.writerow(header)
	out.writerows([[number(v) for v in row] for row in rows])
	return buffer.getvalue()


def _emit(text: str, out: Optional[str]) -> None :
	if out is None :
		sys.stdout.write(text)
		return

	with open(out, 'w', encoding='utf-8', newline='') as file :
		file.write(text)


def _emit_avro(rows: Sequence[Any], model: type, out: Optional[str]) -> None :
	if out is None :
		raise ConfigError('avro output is binary and needs an --out path')

	with open(out, 'wb') as file :
		file.write(encode_rows(rows, model))

	with open(out + '.avsc', 'w', encoding='utf-8') as file :
		file.write(schema_json(model))


def cmd_cost(cfg: RunConfig) -> int :
	validate_range(cfg.dims.e_min, cfg.dims.e_max)
	dims: ModelDims = cfg.model_dims()
	flag_off_model(dims, cfg.dims.e_min, cfg.dims.e_max)
	rows: List[CostRow] = [cost_row(dims.at(E)) for E in range(cfg.dims.e_min, cfg.dims.e_max + 1)]

	if cfg.run.format is Format.avro :
		_emit_avro(rows, CostRow, cfg.run.out)

	else :
		_emit(_csv(COST_HEADER, [[int(row.E), *list(row.dict().values())[1:]] for row in rows]), cfg.run.out)

	return EXIT_OK


def render_opt(result: OptResult) -> str :
	lo, hi = result.bracket
	within: bool = abs(result.derivative_at_opt) < result.derivative_tolerance

	lines: List[str] = [
		f'convention: {result.convention.value}',
		f'range: [{result.e_min}, {result.e_max}]',
		f'e_opt_int: {result.e_opt_int}',
		f's_at_opt: {number(result.s_at_opt)}',
		f'e_opt_cont: {number(result.e_opt_cont)}',
		f'bracket: [{number(lo)}, {number(hi)}]',
		f's_at_cont: {number(result.s_at_cont)}',
		f'derivative_at_opt: {number(result.derivative_at_opt)}',
		f'derivative_tolerance: {number(result.derivative_tolerance)}',
		f'derivative_within_tolerance: {"boundary" if result.at_boundary else "yes" if within else "no"}',
	]

	return '\n'.join(lines) + '\n'


def cmd_opt(cfg: RunConfig) -> int :
	dims: ModelDims = cfg.model_dims()
	result: OptResult = optimize_experts(dims, cfg.dims.e_min, cfg.dims.e_max)
	flag_off_model(dims, cfg.dims.e_min, cfg.dims.e_max)
	_emit(render_opt(result), cfg.run.out)
	return EXIT_OK


def cmd_audit(cfg: RunConfig) -> int :
	"""
	audits the sectional stack and the token-routed baseline. the text report goes to stdout;
	with --out the same rows are also written as csv, or as avro frames.
	"""
	sectional: SectionalConfig = cfg.sectional()
	reports: List[AuditReport] = [
		audit_sectional(sectional, cfg.model_dims()),
		audit_traditional(cfg.model_dims(), seed=cfg.run.seed, heads=cfg.dims.h_pre),
	]

	_emit(''.join(map(render_text, reports)), None)
	rows: List[AuditRow] = [row for report in reports for row in report.rows]

	if cfg.run.out is not None :
		if cfg.run.format is Format.avro :
			_emit_avro(rows, AuditRow, cfg.run.out)

		else :
			_emit(render_csv(*reports), cfg.run.out)

	return EXIT_OK if all(report.passed for report in reports) else EXIT_CHECK_FAILED


def _layer_objective(x: Tensor, cfg: SectionalConfig) -> Callable[[Any], Tensor] :
	return lambda layer : sum_all(transformer_layer(x, layer, cfg.causal, cfg.scale_by_sqrt_dh))


def gradient_checks(cfg: SectionalConfig, tol: float = GRADCHECK_TOL) -> List[GradCheckReport] :
	"""
	checks each block of the sectional stack on its own input shape, then the whole stack.
	"""
	params: SectionalParams = init_sectional(cfg)
	x: Tensor = sample_input(cfg.tokens, cfg.d0, cfg.seed)
	reduced: Tensor = sample_input(cfg.l_reduced, cfg.d0, cfg.seed + 1)
	checks: List[Tuple[str, Callable[[Any], Tensor], Any]] = [('pre layer', _layer_objective(x, cfg), params.pre_layer)]

	for i, layer in enumerate(params.expert_layers) :
		checks.append((f'expert layer {i}', _layer_objective(sample_input(cfg.l_reduced, cfg.d_slice, cfg.seed + 2 + i), cfg), layer))

	checks.append(('aggregation layer', _layer_objective(reduced, cfg), params.agg_layer))
	checks.append(('sectional stack', lambda p : sum_all(sectional_forward(x, p, cfg)), params))

	return [grad_check(f, p, tol=tol, seed=cfg.seed, label=label) for label, f, p in checks]


def render_gradcheck(reports: Sequence[GradCheckReport]) -> str :
	return _csv(
		['block', 'checked', 'skipped', 'max_rel_error', 'failing', 'passed'],
		[[r.label, r.checked, r.skipped, r.max_rel_error, len(r.failing), str(r.passed).lower()] for r in reports],
	)


def cmd_gradcheck(cfg: RunConfig) -> int :
	reports: List[GradCheckReport] = gradient_checks(cfg.sectional())
	_emit(render_gradcheck(reports), cfg.run.out)
	passed: bool = all(r.passed and r.max_rel_error < GRADCHECK_TOL for r in reports)
	return EXIT_OK if passed else EXIT_CHECK_FAILED


def _measured(counter: OpCounter) -> List[str] :
	return [f'  macs {category.value}: {macs}' for category, macs in counter.macs_by_category.items()]


def cmd_compare(cfg: RunConfig) -> int :
	"""
	a dense layer at full length, the token-routed MoE and the sectional MoE on the same input.
	"""
	sectional: SectionalConfig = cfg.sectional()
	x: Tensor = sample_input(sectional.tokens, sectional.d0, cfg.run.seed)
	lines: List[str] = []

	dense = init_params(LayerDims(d_model=sectional.d0, heads=sectional.h_pre, d_ff=sectional.d_ff_pre * sectional.d0), cfg.run.seed)

	with counting() as counter :
		y: Tensor = transformer_layer(x, dense, sectional.causal, sectional.scale_by_sqrt_dh)

	lines += ['architecture: dense', f'  parameters: {param_total(dense)}', f'  output shape: {y.shape}', *_measured(counter)]

	traditional: TraditionalParams = init_traditional(sectional.d0, sectional.E, sectional.d_ff_exp * sectional.d0, cfg.run.seed)

	with counting() as counter :
		y, stats = dispatch_combine(x, gate(x, traditional.gate, cfg.model.k), traditional.experts, cfg.model.capacity_factor)

	lines += ['architecture: traditional', f'  parameters: {param_total(traditional)}', f'  output shape: {y.shape}', *_measured(counter)]
	lines += [
		f'  tokens per expert: {stats.tokens_per_expert}',
		f'  coefficient of variation: {number(stats.coefficient_of_variation)}',
		f'  entropy: {number(stats.entropy)}',
		f'  overflow: {stats.overflow_count}',
		f'  mean expert similarity: {number(mean_similarity(traditional.experts))}',
	]

	with counting() as counter :
		y = sectional_forward(x, init_sectional(sectional), sectional)

	lines += ['architecture: sectional', f'  parameters: {param_count(sectional).total}', f'  output shape: {y.shape}', *_measured(counter)]
	_emit('\n'.join(lines) + '\n', cfg.run.out)
	return EXIT_OK


def route_stats_rows(stats: RoutingStats) -> List[Tuple[str, Any]] :
	rows: List[Tuple[str, Any]] = [(f'tokens_expert_{e}', n) for e, n in enumerate(stats.tokens_per_expert)]
	rows += [(f'unused_capacity_expert_{e}', u) for e, u in enumerate(stats.unused_capacity)]
	rows += [
		('capacity', stats.capacity),
		('coefficient_of_variation', stats.coefficient_of_variation),
		('entropy', stats.entropy),
		('kl_to_uniform', stats.kl_to_uniform),
		('overflow_count', stats.overflow_count),
	]
	return rows


def cmd_route_stats(cfg: RunConfig) -> int :
	E: int = cfg.dims.E
	tokens: int = E * cfg.dims.L
	params: TraditionalParams = init_traditional(cfg.dims.d0, E, cfg.model.d_ff_exp * cfg.dims.d0, cfg.run.seed)
	x: Tensor = sample_input(tokens, cfg.dims.d0, cfg.run.seed)
	assignment = apply_capacity(gate(x, params.gate, cfg.model.k), cfg.model.capacity_factor)

	_emit(_csv(['metric', 'value'], route_stats_rows(routing_stats(assignment, E))), cfg.run.out)
	return EXIT_OK


_commands: Dict[str, Callable[[RunConfig], int]] = {
	'cost': cmd_cost,
	'opt': cmd_opt,
	'audit': cmd_audit,
	'gradcheck': cmd_gradcheck,
	'compare': cmd_compare,
	'route-stats': cmd_route_stats,
}


def build_parser() -> ArgumentParser :
	common: ArgumentParser = ArgumentParser(add_help=False)
	common.add_argument('--config', help='yaml run file with dims, model and run sections')
	common.add_argument('--seed', type=int)
	common.add_argument('--emin', type=int)
	common.add_argument('--emax', type=int)
	common.add_argument('--out', help='output path, stdout when absent')
	common.add_argument('--format', choices=[f.value for f in Format])
	common.add_argument('-v', '--verbose', action='store_true', help='debug logging on stderr')

	parser: ArgumentParser = ArgumentParser(prog='sectionalmoe', description='sectionalized mixture-of-experts laboratory')
	parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
	commands = parser.add_subparsers(dest='command', required=True)

	for name in _commands :
		commands.add_parser(name, parents=[common])

	return parser


def main(argv: Optional[Sequence[str]] = None) -> int :
	args: Namespace = build_parser().parse_args(argv)
	logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.WARNING, format='%(levelname)s %(name)s: %(message)s', force=True)

	try :
		cfg: RunConfig = load_config(args.config).override(
			seed=args.seed,
			e_min=args.emin,
			e_max=args.emax,
			out=args.out,
			format=args.format,
		)
		return _commands[args.command](cfg)

	except (ConfigError, OSError) as e :
		logger.error('%s', e)
		return EXIT_CONFIG

	except EvaluationError as e :
		logger.error('%s', e)
		return EXIT_CHECK_FAILED
