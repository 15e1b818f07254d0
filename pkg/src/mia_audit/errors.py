"""Exception hierarchy shared across the toolkit."""


class InvalidParameterError(ValueError):
  """A numeric parameter is outside its admissible range."""


class DataFormatError(ValueError):
  """An input file or record could not be parsed or validated."""


class DivergenceError(FloatingPointError):
  """Training produced a non-finite loss."""

  def __init__(self, epoch: int, loss: float):
    super().__init__(f'non-finite training loss {loss!r} at epoch {epoch}')
    self.epoch = epoch
    self.loss = loss


class DefenseError(PermissionError):
  """The victim's access mode forbids the requested output."""


class QueryBudgetExceeded(DefenseError):
  """A point was queried more often than the defense's budget allows."""


class ConfigError(ValueError):
  """An experiment configuration failed validation.

  Attributes:
    problems: Every violation found, not only the first.
  """

  def __init__(self, problems: list[str]):
    super().__init__('; '.join(problems))
    self.problems = list(problems)
