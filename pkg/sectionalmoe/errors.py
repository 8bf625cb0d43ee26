from typing import Sequence


class SectionalMoeError(Exception) :
	pass


class DimensionError(SectionalMoeError) :

	def __init__(self: 'DimensionError', message: str, *shapes: Sequence[int]) -> None :
		if shapes :
			message = f'{message}: ' + ' vs '.join(map(lambda s : str(tuple(s)), shapes))
		super().__init__(message)
		self.shapes: tuple[tuple[int, ...], ...] = tuple(map(tuple, shapes))


class ConfigError(SectionalMoeError) :
	pass


class OffModelError(ConfigError) :
	pass


class ContractError(SectionalMoeError) :
	pass


class UnsupportedOperation(SectionalMoeError) :
	pass


class NonFiniteError(SectionalMoeError) :
	pass


class EvaluationError(SectionalMoeError) :
	pass


class DomainError(SectionalMoeError) :
	pass
