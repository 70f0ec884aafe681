import pytest

from latentfuse import cli
from latentfuse.acceptance import AcceptanceContext


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Output directory holding the default dataset and the default 200-epoch model.

    Built once per session through the command line (about 45 s).
    """
    out = tmp_path_factory.mktemp("default_run")
    assert cli.main(["gen-data", "--output-dir", str(out)]) == 0
    assert cli.main(["train", "--output-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def trained(default_run):
    return AcceptanceContext.from_files(default_run / "dataset.bin", default_run / "model.json")


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects acceptance results so the terminal summary can list them together."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for r in sorted(results, key=lambda r: r.number):
            terminalreporter.write_line(r.line())
