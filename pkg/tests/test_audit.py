from csv import reader as csv_reader
from io import StringIO
from itertools import product
from typing import Dict, List

import pytest
from pytest import raises

from sectionalmoe.audit import CSV_HEADER, AuditReport, AuditRow, audit_sectional, audit_traditional, render_csv, render_text
from sectionalmoe.cost import Convention, ModelDims
from sectionalmoe.errors import ConfigError, OffModelError
from sectionalmoe.sectional import SectionalConfig


ON_MODEL: List[tuple] = [
	(E, L, d0)
	for E, L, d0 in product([1, 2, 4], [2, 4, 8], [8, 16])
	if L % E == 0 and d0 // E >= 2
]


def rows_by_equation(report: AuditReport) -> Dict[str, AuditRow] :
	return { row.equation: row for row in report.rows }


class TestAuditSectional :

	@pytest.mark.parametrize('E, L, d0', ON_MODEL)
	def test_AuditSectional_OnModelDims_Passes(self, E: int, L: int, d0: int) :

		# act
		report: AuditReport = audit_sectional(SectionalConfig.create(L=L, E=E, d0=d0))

		# assert
		assert report.passed
		assert all(row.match for row in report.rows if row.required)


	@pytest.mark.parametrize(
		'kwargs, equation, expected', [
			({ 'E': 2, 'L': 4, 'd0': 8 }, 'pre qkv', 1536),
			({ 'E': 1, 'L': 2, 'd0': 4 }, 'experts qkv', 96),
			({ 'E': 2, 'L': 2, 'd0': 4 }, 'experts attention', 8),
			({ 'E': 2, 'L': 2, 'd0': 4 }, 'pre attention', 128),
		],
	)
	def test_AuditSectional_SmallModels_KnownCounts(self, kwargs: dict, equation: str, expected: int) :

		# act
		row: AuditRow = rows_by_equation(audit_sectional(SectionalConfig.create(**kwargs)))[equation]

		# assert
		assert row.predicted == expected
		assert row.measured == expected
		assert row.match


	@pytest.mark.parametrize('h_pre, h_exp', [(2, 1), (1, 2), (4, 2)])
	def test_AuditSectional_MultiHead_StillPasses(self, h_pre: int, h_exp: int) :

		# act
		report: AuditReport = audit_sectional(SectionalConfig.create(L=4, E=2, d0=16, h_pre=h_pre, h_exp=h_exp))

		# assert
		assert report.passed


	def test_AuditSectional_SeveralExperts_PrintedPreAttentionIsInformational(self) :

		# act
		report: AuditReport = audit_sectional(SectionalConfig.create(L=4, E=2, d0=8))
		row: AuditRow = rows_by_equation(report)['pre attention (printed simplification)']

		# assert
		assert not row.required
		assert not row.match
		assert row.predicted * 2 == row.measured
		assert report.passed


	def test_AuditSectional_InformationalRows_MatchMeasuredCounts(self) :

		# act
		rows: Dict[str, AuditRow] = rows_by_equation(audit_sectional(SectionalConfig.create(L=4, E=2, d0=8)))

		# assert
		for equation in ('pre output projection', 'experts output projection', 'pooling', 'ffn', 'aggregation') :
			assert not rows[equation].required
			assert rows[equation].match, equation


	def test_AuditSectional_OffModelRatio_OffModelError(self) :

		# arrange
		cfg: SectionalConfig = SectionalConfig.create(L=4, E=2, d0=8, r=2)

		# assert
		with raises(OffModelError) :
			audit_sectional(cfg)


	def test_AuditSectional_OffModelRatio_IsConfigError(self) :

		# assert
		with raises(ConfigError) :
			audit_sectional(SectionalConfig.create(L=4, E=2, d0=8, r=8))


	def test_AuditSectional_MismatchedDims_ConfigError(self) :

		# arrange
		cfg: SectionalConfig = SectionalConfig.create(L=4, E=2, d0=8)

		# assert
		with raises(ConfigError) :
			audit_sectional(cfg, ModelDims.create(L=2, E=2, d0=8))


	def test_AuditSectional_RepeatedRuns_IdenticalReports(self) :

		# arrange
		cfg: SectionalConfig = SectionalConfig.create(L=4, E=2, d0=8, seed=3)

		# assert
		assert audit_sectional(cfg) == audit_sectional(cfg)


	def test_AuditSectional_Causal_CountsUnchanged(self) :

		# act
		plain: AuditReport = audit_sectional(SectionalConfig.create(L=4, E=2, d0=8))
		causal: AuditReport = audit_sectional(SectionalConfig.create(L=4, E=2, d0=8, causal=True))

		# assert
		assert causal.passed
		assert [row.measured for row in causal.rows] == [row.measured for row in plain.rows]


class TestAuditTraditional :

	def test_AuditTraditional_SmallModel_KnownCounts(self) :

		# act
		rows: Dict[str, AuditRow] = rows_by_equation(audit_traditional(ModelDims.create(L=2, E=2, d0=4)))

		# assert
		assert rows['traditional qkv'].measured == 192
		assert rows['traditional attention (consistent)'].measured == 64
		assert rows['traditional attention (consistent)'].match
		assert rows['traditional attention (paper_literal)'].predicted == 32
		assert not rows['traditional attention (paper_literal)'].match
		assert not rows['traditional attention (paper_literal)'].required


	@pytest.mark.parametrize('E, L, d0, heads', [(1, 2, 4, 1), (2, 3, 8, 2), (4, 4, 8, 4)])
	def test_AuditTraditional_VariousDims_Passes(self, E: int, L: int, d0: int, heads: int) :

		# act
		report: AuditReport = audit_traditional(ModelDims.create(L=L, E=E, d0=d0), heads=heads)

		# assert
		assert report.passed
		assert report.architecture == 'traditional'


	def test_AuditTraditional_ExplicitTokens_OverridesPerExpertCount(self) :

		# act
		rows: Dict[str, AuditRow] = rows_by_equation(audit_traditional(ModelDims.create(L=2, E=2, d0=4), tokens=8))

		# assert
		assert rows['traditional qkv'].measured == 3 * 8 * 4 * 4
		assert rows['traditional attention (consistent)'].measured == 2 * 2 * 4 * 4 * 4


	def test_AuditTraditional_FractionalExperts_ConfigError(self) :

		# assert
		with raises(ConfigError) :
			audit_traditional(ModelDims.create(L=2, E=2.5, d0=4))


	def test_AuditTraditional_PaperLiteralConvention_ReportsConvention(self) :

		# act
		report: AuditReport = audit_traditional(ModelDims.create(L=2, E=2, d0=4, convention=Convention.paper_literal))

		# assert
		assert report.convention is Convention.paper_literal
		assert report.passed


class TestRendering :

	def test_RenderText_PassingReport_EndsWithVerdict(self) :

		# arrange
		report: AuditReport = audit_sectional(SectionalConfig.create(L=2, E=2, d0=4))

		# act
		text: str = render_text(report)

		# assert
		assert text.startswith('sectional audit, convention consistent\n')
		assert text.endswith('PASS\n')
		for row in report.rows :
			assert row.equation in text


	def test_RenderCsv_TwoReports_OneLinePerRowUnderHeader(self) :

		# arrange
		sectional: AuditReport = audit_sectional(SectionalConfig.create(L=2, E=2, d0=4))
		traditional: AuditReport = audit_traditional(ModelDims.create(L=2, E=2, d0=4))

		# act
		lines: List[List[str]] = list(csv_reader(StringIO(render_csv(sectional, traditional))))

		# assert
		assert lines[0] == CSV_HEADER
		assert len(lines) == 1 + len(sectional.rows) + len(traditional.rows)
		for line, row in zip(lines[1:], sectional.rows + traditional.rows) :
			assert line == [row.equation, str(row.predicted), str(row.measured), str(row.match).lower(), row.note]


	def test_AuditReport_VerdictDisagreesWithRows_ValidationError(self) :

		# arrange
		row: AuditRow = AuditRow(equation='x', predicted=1, measured=2, match=False, required=True)

		# assert
		with raises(ValueError) :
			AuditReport(architecture='sectional', convention=Convention.consistent, rows=[row], passed=True)
