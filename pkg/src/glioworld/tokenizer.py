"""Clinical text templates, the closed toy vocabulary, the volumetric patch
autoencoder, and assembly of the interleaved token sequence."""

import re
from dataclasses import dataclass, field

import numpy as np

from .cohort import TreatmentPlan, TreatmentToken, Volume

# ---------------------------------------------------------------------------
# vocabulary

BOS, EOS, BOI, EOI, PAD = "<bos>", "<eos>", "<boi>", "<eoi>", "<pad>"

_WORDS = [
    "Female", "Male", "years", "old", "brain", "glioma", "grade",
    "Prior", "treatment", "none", "What", "is", "the", "next-step",
    "plan", "Conducted", "over", "an", "interval", "of", "days",
]
_PUNCT = [",", ".", "?", ":", "+"]
_DIGITS = [str(i) for i in range(10)]


class Vocabulary:
    """Fixed word-level vocabulary over the closed template lexicon.

    Ids 0..4 are structural specials, 5..9 the five planning tokens (the only
    trainable embedding rows), and everything above is frozen base lexicon.
    """

    def __init__(self):
        specials = [BOS, EOS, BOI, EOI, PAD]
        planning = [t.label for t in TreatmentToken]
        base = _WORDS + _PUNCT + _DIGITS
        self.tokens = specials + planning + base
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        self.bos = self.id_of[BOS]
        self.eos = self.id_of[EOS]
        self.boi = self.id_of[BOI]
        self.eoi = self.id_of[EOI]
        self.pad = self.id_of[PAD]
        self.planning_ids = tuple(self.id_of[t.label] for t in TreatmentToken)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def plan_id(self, tok: TreatmentToken) -> int:
        return self.id_of[TreatmentToken(tok).label]


_TOKEN_RE = re.compile(
    r"\[(?:SUR|CRT|RT|TMZ|AM)\]|[A-Za-z][A-Za-z-]*|[0-9]|[,.?:+]|\S"
)


def text_encode(vocab: Vocabulary, text: str):
    """Tokenize template text to ids; numbers become digit sequences."""
    ids = []
    for m in _TOKEN_RE.finditer(text):
        piece = m.group(0)
        if piece not in vocab.id_of:
            raise ValueError(f"out-of-vocabulary span {piece!r} at position {m.start()}")
        ids.append(vocab.id_of[piece])
    return ids


def text_decode(vocab: Vocabulary, ids) -> str:
    """Inverse of text_encode on template-shaped text."""
    parts = []
    prev = None
    for i in ids:
        tok = vocab.tokens[int(i)]
        glue_left = tok in (",", ".", "?", ":") or (
            prev is not None and prev in _DIGITS and tok in _DIGITS
        )
        if parts and not glue_left:
            parts.append(" ")
        parts.append(tok)
        prev = tok
    return "".join(parts)


# ---------------------------------------------------------------------------
# templates


def render_context(sex: str, age: int, grade: int, history,
                   task: str, plan: TreatmentPlan = None, tau: int = None) -> str:
    """Render the clinical context string for either task.

    history is a list of TreatmentPlan administered so far, oldest first.
    """
    if task not in ("plan", "img"):
        raise ValueError(f"unknown task {task!r}")
    if task == "img" and (plan is None or tau is None):
        raise ValueError("imaging context requires plan and tau")

    sex_word = "Female" if sex.upper().startswith("F") else "Male"
    hist = ", ".join(str(p) for p in history) if history else "none"
    head = f"{sex_word}, {age} years old, brain glioma grade {grade}. Prior treatment: {hist}."
    if task == "plan":
        return head + " What is the next-step treatment plan?"
    return head + f" Conducted treatment: {plan} over an interval of {int(tau)} days."


# ---------------------------------------------------------------------------
# volumetric patch autoencoder


@dataclass
class LatentGrid:
    """Patch latents on a (side, side, side) grid, flattened token-major."""

    values: np.ndarray      # (L_img, C_lat)
    side: int
    positions: np.ndarray   # (L_img, 3) integer grid coordinates

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def grid_positions(side: int) -> np.ndarray:
    idx = np.indices((side, side, side)).reshape(3, -1).T
    return idx.astype(np.int64)


class PatchAutoencoder:
    """Per-patch affine encoder/decoder.

    With c_lat == 3*patch^3 and identity initialization, decode(encode(v))
    reproduces v exactly. With smaller c_lat, `prefit` computes the optimal
    linear maps (PCA over patch vectors) from sample volumes.
    """

    def __init__(self, patch: int, c_lat: int = 0, dtype=np.float32):
        self.patch = patch
        self.full = 3 * patch ** 3
        self.c_lat = c_lat if c_lat > 0 else self.full
        if self.c_lat > self.full:
            raise ValueError("latent width cannot exceed patch dimensionality")
        self.dtype = dtype
        eye = np.eye(self.full, dtype=dtype)
        self.enc_w = eye[:, : self.c_lat].copy()
        self.dec_w = eye[: self.c_lat, :].copy()
        self.mu = np.zeros(self.full, dtype=dtype)

    def params(self) -> dict:
        return {"voltok.enc_w": self.enc_w, "voltok.dec_w": self.dec_w,
                "voltok.mu": self.mu}

    def load_params(self, params: dict) -> None:
        self.enc_w = params["voltok.enc_w"]
        self.dec_w = params["voltok.dec_w"]
        self.mu = params["voltok.mu"]
        self.c_lat = self.enc_w.shape[1]

    def _to_patches(self, data: np.ndarray) -> np.ndarray:
        c, d, h, w = data.shape
        p = self.patch
        if d % p or h % p or w % p:
            raise ValueError(f"volume shape {data.shape} not divisible by patch {p}")
        s = d // p
        x = data.reshape(c, s, p, s, p, s, p)
        x = x.transpose(1, 3, 5, 0, 2, 4, 6)  # (s,s,s, c,p,p,p)
        return x.reshape(s ** 3, self.full)

    def _from_patches(self, flat: np.ndarray, side: int) -> np.ndarray:
        p = self.patch
        x = flat.reshape(side, side, side, 3, p, p, p)
        x = x.transpose(3, 0, 4, 1, 5, 2, 6)
        return x.reshape(3, side * p, side * p, side * p)

    def encode(self, volume: Volume) -> LatentGrid:
        flat = self._to_patches(volume.data.astype(self.dtype))
        z = (flat - self.mu) @ self.enc_w
        side = volume.data.shape[1] // self.patch
        return LatentGrid(values=z, side=side, positions=grid_positions(side))

    def decode(self, grid: LatentGrid) -> Volume:
        flat = grid.values @ self.dec_w + self.mu
        return Volume(self._from_patches(flat, grid.side).astype(np.float32))

    def prefit(self, volumes, c_lat: int) -> None:
        """Fit optimal rank-c_lat linear maps by PCA over patch vectors."""
        if not (0 < c_lat <= self.full):
            raise ValueError("c_lat out of range")
        pats = np.concatenate(
            [self._to_patches(v.data.astype(np.float64)) for v in volumes], axis=0)
        mu = pats.mean(axis=0)
        centered = pats - mu
        cov = centered.T @ centered / max(len(centered) - 1, 1)
        evals, evecs = np.linalg.eigh(cov)
        top = evecs[:, np.argsort(evals)[::-1][:c_lat]]
        self.c_lat = c_lat
        self.enc_w = top.astype(self.dtype)
        self.dec_w = top.T.astype(self.dtype)
        self.mu = mu.astype(self.dtype)


def noise_augment(grid: LatentGrid, t: float, z0: np.ndarray) -> LatentGrid:
    """Linear interpolation from noise to data: z_t = t*z1 + (1-t)*z0."""
    if z0.shape != grid.values.shape:
        raise ValueError(f"noise shape {z0.shape} != latent shape {grid.values.shape}")
    zt = t * grid.values + (1.0 - t) * z0
    return LatentGrid(values=zt, side=grid.side, positions=grid.positions)


# ---------------------------------------------------------------------------
# interleaved sequence


@dataclass
class TokenSequence:
    """[BOS][BOI]{MRI}[EOI]{TXT}[EOS] with index partitions.

    For the imaging task, `img` holds the noise-augmented latent and
    `img_cur` the deterministic current-scan latent fused at the same slots.
    """

    ids: np.ndarray           # (L,) int64; image slots carry -1
    img: LatentGrid
    task: str
    i_text: np.ndarray        # indices of text tokens
    i_img: np.ndarray         # indices of image slots
    i_boundary: np.ndarray    # BOS/BOI/EOI/EOS indices
    img_cur: LatentGrid = None
    text_ids: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def build_sequence(vocab: Vocabulary, mri: LatentGrid, text_ids, task: str,
                   current: LatentGrid = None) -> TokenSequence:
    """Assemble the interleaved sequence and its index partitions."""
    if task not in ("plan", "img"):
        raise ValueError(f"unknown task {task!r}")
    if task == "img":
        if current is None:
            raise ValueError("imaging sequences need the current-scan latent")
        if current.values.shape != mri.values.shape:
            raise ValueError("current latent shape mismatch")
    elif current is not None:
        raise ValueError("planning sequences take no separate current latent")

    l_img = mri.n_tokens
    n_text = len(text_ids)
    L = l_img + n_text + 4
    ids = np.full(L, -1, dtype=np.int64)
    ids[0] = vocab.bos
    ids[1] = vocab.boi
    ids[2 + l_img] = vocab.eoi
    ids[3 + l_img: 3 + l_img + n_text] = np.asarray(text_ids, dtype=np.int64)
    ids[L - 1] = vocab.eos

    i_img = np.arange(2, 2 + l_img)
    i_text = np.arange(3 + l_img, 3 + l_img + n_text)
    i_boundary = np.array([0, 1, 2 + l_img, L - 1])
    return TokenSequence(ids=ids, img=mri, task=task, i_text=i_text,
                         i_img=i_img, i_boundary=i_boundary, img_cur=current,
                         text_ids=list(text_ids))
