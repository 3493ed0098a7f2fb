import re

# mention markers stay whole; otherwise word runs and single punctuation marks
TOKEN_RE = re.compile(r"@\w+|\w+|[^\w\s]")
MARKER_RE = re.compile(r"@(\w+)")


def tokenize(text: str) -> list[str]:
    return [m.group().lower() for m in TOKEN_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group().casefold(), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]
