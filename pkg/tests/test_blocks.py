from typing import List, Tuple

import numpy as np
import pytest
from pytest import raises

from sectionalmoe.blocks import QKV_ROLES, AttentionParams, FfnParams, GradCheckReport, LayerDims, LayerParams, attention_weights, ffn_forward, grad_check, init_params, layer_param_count, linear, mha_forward, param_total, sample_input, transformer_layer, tree_leaves, tree_replace
from sectionalmoe.errors import ConfigError, ContractError, DimensionError, EvaluationError
from sectionalmoe.models import Strict
from sectionalmoe import tensor
from sectionalmoe.tensor import Category, Tensor, _matmul_adjoint, counting, identity, matmul, ones, relu, scale, sum_all, zeros


def zero_layer(d: int, d_ff: int, heads: int = 1) -> LayerParams :
	return LayerParams(
		attn=AttentionParams(w_q=zeros(d, d), w_k=zeros(d, d), w_v=zeros(d, d), w_o=zeros(d, d), heads=heads),
		ffn=FfnParams(w1=zeros(d, d_ff), b1=zeros(d_ff), w2=zeros(d_ff, d), b2=zeros(d)),
		ln1_gamma=ones(d),
		ln1_beta=zeros(d),
		ln2_gamma=ones(d),
		ln2_beta=zeros(d),
	)


class TestLinear :

	def test_Linear_IdentityWeightNoBias_InputUnchanged(self) :

		# arrange
		x: Tensor = sample_input(3, 4, 0)

		# act
		y: Tensor = linear(x, identity(4))

		# assert
		assert y.equals(x)


	def test_Linear_QkvCategory_CountsTokensTimesInTimesOut(self) :

		# act
		with counting() as counter :
			linear(ones(2, 4), ones(4, 4), category=Category.qkv)

		# assert
		assert counter.count(Category.qkv) == 32


	def test_Linear_WithBias_BiasAdded(self) :

		# act
		y: Tensor = linear(Tensor([[1, 2]]), Tensor([[1], [1]]), Tensor([3]))

		# assert
		assert y.tolist() == [[6]]


	def test_Linear_WidthMismatch_DimensionError(self) :

		# assert
		with raises(DimensionError) :
			linear(ones(2, 3), ones(4, 4))


class TestAttention :

	@pytest.mark.parametrize('heads', [1, 2, 4])
	def test_MhaForward_SelfAttention_ScoreAndProjectionCountsIndependentOfHeads(self, heads: int) :

		# arrange
		T, d = 4, 8
		p: AttentionParams = init_params(LayerDims(d_model=d, heads=heads, d_ff=d), 0).attn
		x: Tensor = sample_input(T, d, 1)

		# act
		with counting() as counter :
			mha_forward(x, x, p)

		# assert
		assert counter.count(Category.attn_scores) == 2 * T * T * d
		assert counter.count(Category.qkv, roles=QKV_ROLES) == 3 * T * d * d
		assert counter.count(Category.qkv, roles=['out_proj']) == T * d * d


	def test_MhaForward_CrossAttention_QkvCountsFollowBothLengths(self) :

		# arrange
		d: int = 4
		p: AttentionParams = init_params(LayerDims(d_model=d, heads=2, d_ff=d), 0).attn

		# act
		with counting() as counter :
			y: Tensor = mha_forward(sample_input(2, d, 1), sample_input(6, d, 2), p)

		# assert
		assert y.shape == (2, d)
		assert counter.count(Category.qkv, roles=QKV_ROLES) == (2 + 2 * 6) * d * d
		assert counter.count(Category.attn_scores) == 2 * 2 * 6 * d


	def test_MhaForward_SingleToken_OutputIsProjectedValue(self) :

		# arrange
		p: AttentionParams = init_params(LayerDims(d_model=4, heads=1, d_ff=4), 3).attn
		x: Tensor = sample_input(1, 4, 4)

		# act
		weights: List[Tensor] = attention_weights(x, x, p)
		y: Tensor = mha_forward(x, x, p)

		# assert
		assert weights[0].tolist() == [[1.0]]
		assert np.allclose(y.array, x.array @ p.w_v.array @ p.w_o.array, rtol=0, atol=1e-12)


	def test_AttentionWeights_CausalTwoTokens_FirstRowAttendsToItself(self) :

		# arrange
		p: AttentionParams = init_params(LayerDims(d_model=4, heads=1, d_ff=4), 0).attn
		x: Tensor = sample_input(2, 4, 0)

		# act
		weights: List[Tensor] = attention_weights(x, x, p, causal=True)

		# assert
		assert weights[0].array[0].tolist() == [1.0, 0.0]


	@pytest.mark.parametrize('heads', [1, 2, 4])
	def test_AttentionWeights_RandomInput_RowsAreConvexCombinations(self, heads: int) :

		# arrange
		p: AttentionParams = init_params(LayerDims(d_model=8, heads=heads, d_ff=8), heads).attn
		x: Tensor = sample_input(5, 8, 7)

		# act
		weights: List[Tensor] = attention_weights(x, x, p)

		# assert
		assert len(weights) == heads

		for w in weights :
			assert np.allclose(w.array.sum(axis=1), 1, rtol=0, atol=1e-12)
			assert np.all((w.array >= 0) & (w.array <= 1))


	def test_MhaForward_CausalWithUnequalLengths_ContractError(self) :

		# arrange
		p: AttentionParams = init_params(LayerDims(d_model=4, heads=1, d_ff=4), 0).attn

		# assert
		with raises(ContractError) :
			mha_forward(ones(2, 4), ones(3, 4), p, causal=True)


	def test_AttentionParams_HeadsDoNotDivideWidth_ValidationError(self) :

		# assert
		with raises(ValueError) :
			AttentionParams(w_q=ones(6, 6), w_k=ones(6, 6), w_v=ones(6, 6), w_o=ones(6, 6), heads=4)


class TestFfn :

	def test_FfnForward_ZeroWeights_ZeroOutput(self) :

		# arrange
		p: FfnParams = FfnParams(w1=zeros(3, 5), b1=zeros(5), w2=zeros(5, 3), b2=zeros(3))

		# act
		y: Tensor = ffn_forward(sample_input(4, 3, 0), p)

		# assert
		assert y.tolist() == zeros(4, 3).tolist()


	def test_FfnForward_TwoWideFourHidden_CountsFortyEight(self) :

		# arrange
		p: FfnParams = init_params(LayerDims(d_model=2, d_ff=4), 0).ffn

		# act
		with counting() as counter :
			ffn_forward(sample_input(3, 2, 0), p)

		# assert
		assert counter.count(Category.ffn) == 48


	def test_FfnForward_NegativePreActivations_OutputIsOutputBias(self) :

		# arrange
		p: FfnParams = FfnParams(w1=ones(2, 4), b1=Tensor([-10, -10, -10, -10]), w2=ones(4, 2), b2=Tensor([0.5, -1.5]))

		# act
		y: Tensor = ffn_forward(Tensor([[1, 2], [0, 3], [-1, 1]]), p)

		# assert
		assert y.tolist() == [[0.5, -1.5]] * 3


	def test_FfnParams_InconsistentShapes_ValidationError(self) :

		# assert
		with raises(ValueError) :
			FfnParams(w1=ones(2, 4), b1=zeros(3), w2=ones(4, 2), b2=zeros(2))


class TestTransformerLayer :

	def test_TransformerLayer_ZeroWeights_ResidualIdentity(self) :

		# arrange
		x: Tensor = sample_input(4, 8, 2)

		# act
		y: Tensor = transformer_layer(x, zero_layer(8, 16))

		# assert
		assert y.equals(x)


	@pytest.mark.parametrize('T, d', [(4, 8), (6, 12)])
	def test_TransformerLayer_AnyShape_OutputShapeEqualsInput(self, T: int, d: int) :

		# act
		y: Tensor = transformer_layer(sample_input(T, d, 0), init_params(LayerDims(d_model=d, heads=2, d_ff=2 * d), 0))

		# assert
		assert y.shape == (T, d)


	@pytest.mark.parametrize('seed', range(3))
	def test_TransformerLayer_PermutedRows_OutputRowsPermutedIdentically(self, seed: int) :

		# arrange
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=16), seed)
		x: Tensor = sample_input(6, 8, seed)
		perm: np.ndarray = np.random.default_rng(seed).permutation(6)

		# act
		y: Tensor = transformer_layer(x, p)
		y_perm: Tensor = transformer_layer(Tensor(x.array[perm]), p)

		# assert
		assert np.allclose(y_perm.array, y.array[perm], rtol=0, atol=1e-9)


	@pytest.mark.parametrize('i', range(5))
	def test_TransformerLayer_Causal_LaterTokensDoNotChangeEarlierOutputs(self, i: int) :

		# arrange
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=16), 1)
		x: np.ndarray = sample_input(6, 8, 1).array.copy()
		perturbed: np.ndarray = x.copy()
		perturbed[i + 1:] += np.random.default_rng(i).standard_normal(perturbed[i + 1:].shape) * 5

		# act
		y: Tensor = transformer_layer(Tensor(x), p, causal=True)
		y_perturbed: Tensor = transformer_layer(Tensor(perturbed), p, causal=True)

		# assert
		assert np.allclose(y.array[:i + 1], y_perturbed.array[:i + 1], rtol=0, atol=1e-12)
		assert not np.allclose(y.array[i + 1:], y_perturbed.array[i + 1:])


	def test_TransformerLayer_WrongWidth_DimensionError(self) :

		# assert
		with raises(DimensionError) :
			transformer_layer(ones(4, 6), zero_layer(8, 8))


class TestInitParams :

	def test_InitParams_SameSeed_BitwiseIdentical(self) :

		# arrange
		dims: LayerDims = LayerDims(d_model=8, heads=2, d_ff=16)

		# act
		a: LayerParams = init_params(dims, 5)
		b: LayerParams = init_params(dims, 5)

		# assert
		assert all(x.equals(y) for (_, x), (_, y) in zip(tree_leaves(a), tree_leaves(b)))


	def test_InitParams_DifferentSeeds_WeightsDiffer(self) :

		# arrange
		dims: LayerDims = LayerDims(d_model=8, heads=2, d_ff=16)

		# act
		a: LayerParams = init_params(dims, 1)
		b: LayerParams = init_params(dims, 2)

		# assert
		assert not a.attn.w_q.equals(b.attn.w_q)
		assert not a.ffn.w1.equals(b.ffn.w1)


	def test_InitParams_AnySeed_EntriesWithinThreeOverRootFanIn(self) :

		# act
		p: LayerParams = init_params(LayerDims(d_model=16, heads=1, d_ff=8), 11)

		# assert
		for w in (p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o, p.ffn.w1) :
			assert np.abs(w.array).max() <= 3 / np.sqrt(16)

		assert np.abs(p.ffn.w2.array).max() <= 3 / np.sqrt(8)


	def test_LayerParamCount_MatchesLeafSizes(self) :

		# act
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=24), 0)

		# assert
		assert param_total(p) == layer_param_count(8, 24)


	def test_LayerDims_UnknownKey_ConfigError(self) :

		# assert
		with raises(ConfigError) :
			LayerDims.create(d_model=8, d_ff=8, dropout=0.1)


	def test_LayerDims_IsStrict(self) :

		# assert
		assert issubclass(LayerDims, Strict)


class TestTree :

	def test_TreeReplace_NestedLeaf_OnlyThatLeafChanges(self) :

		# arrange
		p: LayerParams = init_params(LayerDims(d_model=4, d_ff=4), 0)
		path: Tuple = ('ffn', 'b2')

		# act
		q: LayerParams = tree_replace(p, path, ones(4))

		# assert
		assert q.ffn.b2.tolist() == [1, 1, 1, 1]
		assert p.ffn.b2.tolist() == [0, 0, 0, 0]
		assert q.attn.w_q is p.attn.w_q


	def test_TreeLeaves_Tuple_IndexedPaths(self) :

		# act
		leaves = tree_leaves((ones(2), [zeros(3)]))

		# assert
		assert [path for path, _ in leaves] == [(0,), (1, 0)]


class TestGradCheck :

	def test_GradCheck_LinearObjective_ExactMatch(self) :

		# arrange
		x: Tensor = sample_input(3, 4, 0)
		params: Tuple[Tensor, Tensor] = (sample_input(4, 2, 1), Tensor([0.5, -0.5]))

		# act
		report: GradCheckReport = grad_check(lambda p : sum_all(linear(x, p[0], p[1])), params)

		# assert
		assert report.checked == 10
		assert report.skipped == 0
		assert report.max_rel_error < 1e-7
		assert report.passed


	@pytest.mark.parametrize('seed', range(5))
	def test_GradCheck_TransformerLayer_PassesAtDefaultTolerance(self, seed: int) :

		# arrange
		x: Tensor = sample_input(4, 8, seed)
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=16), seed)

		# act
		report: GradCheckReport = grad_check(lambda q : sum_all(transformer_layer(x, q)), p, h=1e-5, seed=seed)

		# assert
		assert report.checked + report.skipped == 200
		assert report.max_rel_error < 1e-4
		assert report.passed


	@pytest.mark.parametrize('seed', range(5))
	def test_GradCheck_AttentionAndFfnBlocks_Pass(self, seed: int) :

		# arrange
		x: Tensor = sample_input(4, 8, seed)
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=16), seed)

		# act
		attention: GradCheckReport = grad_check(lambda q : sum_all(mha_forward(x, x, q, causal=True)), p.attn, seed=seed)
		ffn: GradCheckReport = grad_check(lambda q : sum_all(ffn_forward(x, q)), p.ffn, seed=seed)

		# assert
		assert attention.passed
		assert ffn.passed


	def test_GradCheck_ZeroTolerance_FlagsEveryInexactCoordinate(self) :

		# arrange
		x: Tensor = sample_input(4, 8, 0)
		p: LayerParams = init_params(LayerDims(d_model=8, heads=2, d_ff=16), 0)

		# act
		report: GradCheckReport = grad_check(lambda q : sum_all(transformer_layer(x, q)), p, tol=0)

		# assert
		assert not report.passed
		assert report.failing
		assert all(c.rel_error > 0 for c in report.failing)
		assert report.max_rel_error == max(c.rel_error for c in report.failing)


	def test_GradCheck_DoubledAdjointOnTinyGradients_Fails(self, mocker) :

		# arrange
		doubled = lambda inputs, output, g : tuple(2 * grad for grad in _matmul_adjoint(inputs, output, g))
		mocker.patch.dict(tensor._adjoints, { 'matmul': doubled })
		x: Tensor = sample_input(4, 8, 0)
		w: Tensor = sample_input(8, 8, 1)

		# act
		report: GradCheckReport = grad_check(lambda p : scale(sum_all(matmul(x, p)), 1e-5), w)

		# assert
		assert report.checked == 64
		assert not report.passed
		assert report.max_rel_error > 0.4


	def test_GradCheck_TinyButCorrectGradients_Pass(self) :

		# arrange
		x: Tensor = sample_input(4, 8, 0)
		w: Tensor = sample_input(8, 8, 1)

		# act
		report: GradCheckReport = grad_check(lambda p : scale(sum_all(matmul(x, p)), 1e-5), w)

		# assert
		assert report.checked == 64
		assert report.max_rel_error < 1e-4
		assert report.passed


	def test_GradCheck_EveryCoordinateOnKink_NotPassed(self) :

		# act
		report: GradCheckReport = grad_check(lambda p : sum_all(relu(p)), zeros(3))

		# assert
		assert report.checked == 0
		assert report.skipped == 3
		assert not report.failing
		assert not report.passed


	@pytest.mark.parametrize('h', [0, -1e-5])
	def test_GradCheck_NonPositiveStep_ConfigError(self, h: float) :

		# assert
		with raises(ConfigError) :
			grad_check(lambda p : sum_all(p), ones(2), h=h)


	def test_GradCheck_NonFiniteObjective_EvaluationError(self) :

		# assert
		with raises(EvaluationError) :
			grad_check(lambda p : sum_all(scale(p, 1e308)), ones(2, 2))


	def test_GradCheck_VectorObjective_EvaluationError(self) :

		# assert
		with raises(EvaluationError) :
			grad_check(lambda p : scale(p, 2), ones(3))
