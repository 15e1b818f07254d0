import pytest

# Acceptance verdict lines, echoed in the terminal summary.
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
  def record(criterion: int, ok: bool, detail: str) -> bool:
    VERDICTS.append(f'criterion {criterion}: {"PASS" if ok else "FAIL"} '
                    f'({detail})')
    print(VERDICTS[-1])
    return ok
  return record


def pytest_terminal_summary(terminalreporter):
  if VERDICTS:
    terminalreporter.section('acceptance')
    for line in sorted(VERDICTS, key=lambda s: int(s.split()[1][:-1])):
      terminalreporter.write_line(line)
