"""Tokenizer - Byte-level tokenizer với 4 token đặc biệt."""

from typing import Iterable, List

from engine.errors import TokenIndexError

BYTE_VOCAB = 256
PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
IMG_ID = 259
VOCAB_SIZE = 260

SPECIAL_TOKENS = {"PAD": PAD_ID, "BOS": BOS_ID, "EOS": EOS_ID, "IMG": IMG_ID}


class ByteTokenizer:
    """UTF-8 bytes <-> token id; id 256..259 dành cho PAD, BOS, EOS, IMG.

    Không có state nên dùng chung giữa các thread được.
    """

    vocab_size = VOCAB_SIZE
    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    img_id = IMG_ID

    def tokenize(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def detokenize(self, ids: Iterable[int], skip_special: bool = True) -> str:
        """Ghép các byte token lại thành chuỗi.

        Args:
            ids: Dãy token id
            skip_special: Bỏ qua token đặc biệt thay vì báo lỗi

        Raises:
            TokenIndexError: nếu id ngoài vocab, hoặc là special khi skip_special=False
        """
        data = bytearray()
        for token in ids:
            if 0 <= token < BYTE_VOCAB:
                data.append(token)
            elif token < VOCAB_SIZE and skip_special:
                continue
            else:
                raise TokenIndexError(f"Token id {token} không phải byte (V={VOCAB_SIZE})")
        return data.decode("utf-8", errors="replace")

    def encode_bytes(self, raw: bytes) -> List[int]:
        return list(raw)

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        for token in ids:
            if not 0 <= token < BYTE_VOCAB:
                raise TokenIndexError(f"Token id {token} không phải byte (V={VOCAB_SIZE})")
            out.append(token)
        return bytes(out)

    def encode_answer(self, text: str) -> List[int]:
        """Token của câu trả lời, kết thúc bằng EOS."""
        return self.tokenize(text) + [EOS_ID]


def tokenize(text: str) -> List[int]:
    return ByteTokenizer().tokenize(text)


def detokenize(ids: Iterable[int]) -> str:
    return ByteTokenizer().detokenize(ids)
