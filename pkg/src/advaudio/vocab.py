"""Character vocabulary and the token/prompt value types."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
_SPECIALS = (BOS, EOS, PAD)

_PUNCT = ".,'?!:;-\"()/&%$#@*+=<>_~"


def _default_tokens() -> list[str]:
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    digits = [str(d) for d in range(10)]
    return list(_SPECIALS) + letters + [" "] + digits + list(_PUNCT)


@dataclass
class Vocab:
    """Dense-id token table; default 64 entries (3 specials + 61 characters)."""

    tokens: list[str] = field(default_factory=_default_tokens)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocab contains duplicate tokens")
        self._id_of = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self._id_of[BOS]

    @property
    def eos_id(self) -> int:
        return self._id_of[EOS]

    @property
    def pad_id(self) -> int:
        return self._id_of[PAD]

    def encode(self, text: str) -> list[int]:
        """Characters to ids; literal special markers parse as one token."""
        ids = []
        i = 0
        while i < len(text):
            for sp in _SPECIALS:
                if text.startswith(sp, i):
                    ids.append(self._id_of[sp])
                    i += len(sp)
                    break
            else:
                ch = text[i]
                if ch not in self._id_of:
                    raise ContractError(f"character {ch!r} is not in the vocabulary")
                ids.append(self._id_of[ch])
                i += 1
        return ids

    def decode(self, ids) -> str:
        """Ids to text; specials render as their literal markers."""
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"token id {i} outside vocabulary of {len(self)}")
            out.append(self.tokens[i])
        return "".join(out)

    def render_text(self, ids) -> str:
        """Ids to display text with special tokens dropped."""
        return "".join(
            self.tokens[i] for i in ids if self.tokens[i] not in _SPECIALS
        )


DEFAULT_VOCAB = Vocab()


@dataclass
class TokenSequence:
    """Token ids plus their decoded text."""

    ids: list[int]
    text: str

    @classmethod
    def from_text(cls, text: str, vocab: Vocab = DEFAULT_VOCAB) -> "TokenSequence":
        return cls(ids=vocab.encode(text), text=text)

    @classmethod
    def from_ids(cls, ids, vocab: Vocab = DEFAULT_VOCAB) -> "TokenSequence":
        ids = list(ids)
        if any(not 0 <= i < len(vocab) for i in ids):
            raise ContractError("token id outside vocabulary")
        return cls(ids=ids, text=vocab.render_text(ids))

    def __len__(self):
        return len(self.ids)


@dataclass
class PromptText:
    """System instruction plus user prompt, both character-tokenizable."""

    system_instruction: str = ""
    user_prompt: str = ""

    def token_ids(self, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
        return vocab.encode(self.system_instruction) + vocab.encode(self.user_prompt)
