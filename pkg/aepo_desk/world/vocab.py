"""Token vocabulary and role tags for the tool world."""

from dataclasses import dataclass, field
from enum import Enum

from aepo_desk.errors import ConfigError

MIN_VOCAB_SIZE = 10
MAX_DIGITS = 10


class Role(str, Enum):
    PLAIN = "plain"
    DIGIT = "digit"
    TOOL_OPEN = "tool-open"
    TOOL_CLOSE = "tool-close"
    TOOL_RESULT = "tool-result"
    ANSWER = "answer-marker"
    END = "end"


ROLE_ORDER: tuple[Role, ...] = tuple(Role)

# Fixed special tokens, in id order after the digit block.
SPECIALS: tuple[tuple[str, Role], ...] = (
    ("CALL_CALC", Role.TOOL_OPEN),
    ("CALL_LOOKUP", Role.TOOL_OPEN),
    ("END_CALL", Role.TOOL_CLOSE),
    ("ANSWER", Role.ANSWER),
    ("END", Role.END),
    ("SEP", Role.PLAIN),
    ("RESULT", Role.TOOL_RESULT),
    ("ERROR", Role.TOOL_RESULT),
)


@dataclass(frozen=True)
class Vocabulary:
    """Token ids ``[0, size)``.

    Digits occupy the low ids (at most ten of them), then the special tokens,
    then plain filler tokens for whatever room is left.
    """

    size: int
    n_digits: int
    names: tuple[str, ...]
    roles: tuple[Role, ...]
    _ids: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def build(cls, size: int = 24) -> "Vocabulary":
        if size < MIN_VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be >= {MIN_VOCAB_SIZE}, got {size}")

        n_digits = min(MAX_DIGITS, size - len(SPECIALS))
        names: list[str] = [str(d) for d in range(n_digits)]
        roles: list[Role] = [Role.DIGIT] * n_digits
        for name, role in SPECIALS:
            names.append(name)
            roles.append(role)
        filler = 0
        while len(names) < size:
            names.append(f"F{filler}")
            roles.append(Role.PLAIN)
            filler += 1

        ids = {name: i for i, name in enumerate(names)}
        return cls(size, n_digits, tuple(names), tuple(roles), ids)

    def id(self, name: str) -> int:
        """Token id for a symbolic name such as ``"END"``."""
        try:
            return self._ids[name]
        except KeyError:
            raise ConfigError(f"Unknown token name: {name}") from None

    def role(self, token: int) -> Role:
        return self.roles[token]

    def is_digit(self, token: int) -> bool:
        return 0 <= token < self.n_digits

    def name(self, token: int) -> str:
        return self.names[token]

    @property
    def end(self) -> int:
        return self.id("END")

    def render(self, tokens: "list[int] | tuple[int, ...]") -> str:
        return " ".join(self.names[t] for t in tokens)
