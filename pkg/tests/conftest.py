import torch

# single-threaded numerics keep runs bit-reproducible
torch.set_num_threads(1)

CRITERIA = []


def record(name: str, ok: bool, detail: str = "") -> bool:
    CRITERIA.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
