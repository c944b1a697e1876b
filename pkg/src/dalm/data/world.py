"""Constants of the toy audio world and the closed vocabulary built from them.

Every attribute the benchmark asks about is recoverable from the synthetic
signal: pitch sets the fundamental, volume the amplitude, speaking speed
the tone rate, emotion the added harmonic, and each spoken word a fixed
high-frequency marker tone.
"""
from __future__ import annotations

from ..vocab import Tokenizer, split_words

SAMPLE_RATE = 16000

PITCH_LEVELS = {"deep": 100.0, "low": 150.0, "high": 220.0, "shrill": 320.0}
VOLUME_LEVELS = {"faint": 0.05, "quiet": 0.15, "moderate": 0.4, "loud": 0.9}
SPEED_LEVELS = {"slow": 2.0, "normal": 3.0, "quick": 4.0, "rapid": 5.0}
# harmonic number added on top of the fundamental
EMOTION_HARMONICS = {"neutral": None, "happy": 2, "angry": 3, "sad": 4}

LEXICON = (
    "red", "blue", "green", "cat", "dog", "bird", "lake", "path",
    "tree", "sun", "moon", "star", "boat", "fish", "rain", "bell",
)
WORD_TONE_BASE = 1000.0
WORD_TONE_STEP = 160.0

MAX_WORDS = 4
LEAD_SILENCE = 0.2
TAIL_SILENCE = 0.2

CANONICAL_QUESTION = "What can you hear from the audio?"
ASR_PROMPT = "Transcribe the audio."
REWRITE_INSTRUCTION = "Rewrite the following description in your own words, keeping every detail."

# benchmark question templates: attribute -> (category, question)
QUESTION_TEMPLATES = {
    "pitch": ("perception-paralinguistics", "What is the pitch of the voice?"),
    "volume": ("perception-paralinguistics", "How loud is the voice?"),
    "speaking_speed": ("perception-paralinguistics", "What is the speaking pace?"),
    "emotion": ("perception-paralinguistics", "Which emotion does the speaker convey?"),
    "word": ("perception-semantics", "Which word does the speaker say first?"),
    "word_count": ("reasoning-semantics", "How many words does the speaker say?"),
}
WORD_COUNT_CHOICES = ("1", "2", "3", "4")
MC_INSTRUCTION = "Answer with the letter of the correct option."
LETTERS = "ABCDEFGH"

# phrase material for real-corpus metadata values (not synthesised by the toy generator)
EXTRA_VALUES = (
    "female male child young adult elderly teen middle aged senior "
    "american british indian australian canadian irish scottish welsh english accent "
    "surprised fearful disgusted calm excited frustrated "
    "statement question command request greeting complaint "
    "take the winding to reach"
)

CAPTION_WORDS = (
    "a an speaker voice says saying pitch volume pace speed sounding tone about seconds second long "
    "with and in at of is are the clip lasts"
)
CONTEXT_WORDS = "gender age accent emotion pitch volume speaking speed duration intent text unknown s hz"


def level_name(table: dict, value) -> str:
    """Grid name for a numeric attribute (nearest level) or the value itself."""
    if isinstance(value, str):
        return value
    return min(table, key=lambda k: abs(table[k] - float(value)))


def gender_for_pitch(pitch_hz: float) -> str:
    return "male" if pitch_hz < 185.0 else "female"


def word_tone(word: str) -> float:
    return WORD_TONE_BASE + WORD_TONE_STEP * LEXICON.index(word)


def vocabulary_words() -> list[str]:
    words: list[str] = []
    chunks = [
        " ".join(PITCH_LEVELS), " ".join(VOLUME_LEVELS), " ".join(SPEED_LEVELS),
        " ".join(EMOTION_HARMONICS), " ".join(LEXICON), EXTRA_VALUES, CAPTION_WORDS, CONTEXT_WORDS,
        CANONICAL_QUESTION, ASR_PROMPT, REWRITE_INSTRUCTION, MC_INSTRUCTION,
        " ".join(q for _, q in QUESTION_TEMPLATES.values()),
        " ".join(LETTERS), "0 1 2 3 4 5 6 7 8 9",
        ". , : ; ? ! \" ' ( ) [ ] - /",
    ]
    for chunk in chunks:
        for w in split_words(chunk):
            if w not in words:
                words.append(w)
    return words


def default_tokenizer() -> Tokenizer:
    return Tokenizer(vocabulary_words())
