"""Thai text normalization for CER scoring, stage by stage.

ASR transcripts come back in normalized Thai script, so reference text has
to be pushed through the same transformations before edit distance is a
meaningful intelligibility score.
"""

from flowtts.evaluation import cer
from flowtts.thai_text import (
    NormalizationConfig,
    expand_mai_yamok,
    normalize,
    numerals_to_thai,
)

print("Numerals -> Thai number words:")
for digits in ("5", "10", "21", "100", "101", "2500", "1000001"):
    print(f"  {digits:>8} -> {numerals_to_thai(digits)}")
print()

print("Repetition marker (mai yamok) expansion:")
for text in ("ต่างๆ", "ช้า ๆ", "เด็กๆ วิ่งเล่น"):
    print(f"  {text!r} -> {expand_mai_yamok(text)!r}")
print()

config = NormalizationConfig(lexicon={"computer": "คอมพิวเตอร์", "ai": "เอไอ"})
samples = [
    "มี 21 คน",
    "ซื้อ Computer ใหม่ 2 เครื่อง",
    "เด็กๆ ชอบ AI",
]
print("Full pipeline (NFC, transliterate, numerals, mai yamok, strip):")
for text in samples:
    print(f"  {text!r}\n    -> {normalize(text, config)!r}")
print()

reference = normalize("มี 21 คน", config)
for hypothesis_raw in ("มียี่สิบเอ็ดคน", "มียี่สิบคน", "ไม่มีใคร"):
    hypothesis = normalize(hypothesis_raw, config)
    print(f"CER({reference!r}, {hypothesis!r}) = {cer(reference, hypothesis):.4f}")
