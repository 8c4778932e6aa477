from src.utils.constants import EOS_ID
from src.utils.errors import VocabError
from typing import Iterable, List


class Charset:
    """
    Maps characters to class ids. Output classes are [EOS, c_1, ..., c_n]
    (EOS = 0); input embeddings additionally reserve BOS = n + 1.
    """

    def __init__(self, chars: str):
        if not chars or len(set(chars)) != len(chars):
            raise VocabError(f"Charset must be nonempty without repeated characters, got {chars!r}")
        self.chars = chars
        self._index = {ch: i + 1 for i, ch in enumerate(chars)}

    eos_id = EOS_ID

    @property
    def bos_id(self) -> int:
        return len(self.chars) + 1

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    @property
    def num_inputs(self) -> int:
        return len(self.chars) + 2

    def covers(self, word: str) -> bool:
        return all(ch in self._index for ch in word)

    def encode(self, word: str) -> List[int]:
        """
        :raises VocabError: If the word has characters outside the charset.
        """
        try:
            return [self._index[ch] for ch in word]
        except KeyError as e:
            raise VocabError(f"Character {e.args[0]!r} of {word!r} is not in the charset")

    def decode(self, ids: Iterable[int]) -> str:
        """
        Maps ids back to text, stopping at the first EOS.
        """
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if not 1 <= i <= len(self.chars):
                raise VocabError(f"Id {i} is not a character class")
            out.append(self.chars[i - 1])
        return ''.join(out)

    def __len__(self) -> int:
        return len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Charset) and other.chars == self.chars

    def __repr__(self) -> str:
        return f"Charset({self.chars!r})"
