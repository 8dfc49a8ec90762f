"""
Line-oriented section grammar shared by case, scenario, cluster and threshold files.

    # comment
    [section]
    key = value          (settings sections)
    tok tok tok ...      (record sections)

Blank lines and ``#`` comments are ignored. Every token keeps its line and
column so that consumers can raise ParseError pointing at the exact spot.
"""

from dataclasses import dataclass, field

from .errors import ParseError

SECTION_CHARS = set("abcdefghijklmnopqrstuvwxyz_")


# ============================================================================
# Tokens
# ============================================================================

@dataclass(frozen=True)
class Token:
    text: str
    line: int
    column: int


@dataclass(frozen=True)
class Record:
    tokens: tuple[Token, ...]

    @property
    def line(self) -> int:
        return self.tokens[0].line

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, idx):
        return self.tokens[idx]

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]


@dataclass
class Section:
    name: str
    line: int
    records: list[Record] = field(default_factory=list)


@dataclass
class Document:
    """A tokenized file: its sections in order plus full-line comments."""

    source: str
    sections: list[Section]
    comments: list[Token]

    def named(self, name: str) -> list[Section]:
        return [s for s in self.sections if s.name == name]

    def single(self, name: str, required: bool = True) -> Section | None:
        found = self.named(name)
        if len(found) > 1:
            raise ParseError(f"section [{name}] appears more than once", self.source, found[1].line, 1)
        if not found:
            if required:
                raise ParseError(f"missing section [{name}]", self.source, 1, 1)
            return None
        return found[0]

    def expect_only(self, allowed: set[str]) -> None:
        for s in self.sections:
            if s.name not in allowed:
                raise ParseError(f"unknown section [{s.name}]", self.source, s.line, 1)

    def fail(self, token: Token, message: str) -> ParseError:
        return ParseError(message, self.source, token.line, token.column)

    # ------------------------------------------------------------------------
    # Typed conversions
    # ------------------------------------------------------------------------

    def float_(self, token: Token) -> float:
        try:
            value = float(token.text)
        except ValueError:
            raise self.fail(token, f"expected a number, got {token.text!r}") from None
        if value != value or value in (float("inf"), float("-inf")):
            raise self.fail(token, f"expected a finite number, got {token.text!r}")
        return value

    def int_(self, token: Token) -> int:
        try:
            return int(token.text)
        except ValueError:
            raise self.fail(token, f"expected an integer, got {token.text!r}") from None

    def settings(self, section: Section) -> dict[str, Record]:
        """Read ``key = value ...`` records; returns key -> value tokens."""
        out: dict[str, Record] = {}
        for rec in section.records:
            if len(rec) < 3 or rec[1].text != "=":
                raise self.fail(rec[0], "expected 'key = value'")
            key = rec[0].text
            if key in out:
                raise self.fail(rec[0], f"duplicate key {key!r}")
            out[key] = Record(rec.tokens[2:])
        return out

    def arity(self, rec: Record, low: int, high: int | None = None) -> None:
        high = low if high is None else high
        if not low <= len(rec) <= high:
            want = str(low) if low == high else f"{low} to {high}"
            raise self.fail(rec[0], f"expected {want} fields, got {len(rec)}")


# ============================================================================
# Tokenizer
# ============================================================================

def _split(line: str, lineno: int) -> list[Token]:
    tokens = []
    i, n = 0, len(line)
    while i < n:
        if line[i].isspace():
            i += 1
            continue
        start = i
        while i < n and not line[i].isspace():
            i += 1
        tokens.append(Token(line[start:i], lineno, start + 1))
    return tokens


def tokenize(text: str, source: str = "<string>") -> Document:
    sections: list[Section] = []
    comments: list[Token] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("#"):
            comments.append(Token(stripped[1:].strip(), lineno, raw.index("#") + 1))
            continue
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        if body.strip().startswith("["):
            col = body.index("[") + 1
            head = body.strip()
            if not head.endswith("]"):
                raise ParseError("unterminated section header", source, lineno, col)
            name = head[1:-1].strip()
            if not name or not set(name) <= SECTION_CHARS:
                raise ParseError(f"invalid section name {name!r}", source, lineno, col)
            sections.append(Section(name, lineno))
            continue
        tokens = _split(body, lineno)
        if not sections:
            raise ParseError("record outside of any section", source, lineno, tokens[0].column)
        sections[-1].records.append(Record(tuple(tokens)))
    return Document(source, sections, comments)


# ============================================================================
# Serializer
# ============================================================================

def fmt(value) -> str:
    """Shortest text that parses back to the identical value."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(blocks: list[tuple[str, list[list]]], header: list[str] | None = None) -> str:
    """Render (section name, rows) blocks; rows are lists of values."""
    lines = [f"# {h}" for h in header or []]
    for name, rows in blocks:
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        lines.extend(" ".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"
