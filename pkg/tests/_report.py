"""Collects acceptance verdict lines so they appear in the pytest summary."""
RESULTS: list[str] = []


def verdict(number: int, ok: bool, title: str, detail: str = "", extra=()) -> str:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} | {detail}"
    RESULTS.append(line)
    RESULTS.extend(f"        {x}" for x in extra)
    print(line)
    for x in extra:
        print(f"        {x}")
    return line
