"""Registry of acceptance outcomes, printed by the terminal-summary hook in conftest."""

RESULTS: dict[int, list[tuple[bool, str]]] = {}

TITLES = {
    1: "gradients match finite differences; STE equals the clamp-interior indicator",
    2: "quantizer properties; grid-MSE scale equals the exhaustive oracle",
    3: "two-pointer matching equals exhaustive matching; hand scores 0 / 0.1 / 3.1",
    4: "Bernoulli-mask Monte-Carlo loss within 2% of the confidence-weighted loss",
    5: "direct selection finds the noised head; curve selection agrees on top-1",
    6: "ideal targets decode back to F1 = 1",
    7: "end-to-end F1 ordering and time budget",
    8: "byte-identical metric reports on rerun",
}


def record(criterion: int, ok: bool, detail: str) -> None:
    RESULTS.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion} {'PASS' if ok else 'FAIL'}: {detail}")


def summary_lines() -> list[str]:
    lines = []
    for c in sorted(TITLES):
        checks = RESULTS.get(c)
        if checks is None:
            lines.append(f"criterion {c} NOT RUN: {TITLES[c]}")
            continue
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        lines.append(f"criterion {c} {status}: {TITLES[c]}")
        lines += [f"    {'ok  ' if ok else 'FAIL'} {d}" for ok, d in checks]
    return lines
