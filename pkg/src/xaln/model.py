"""Audio autoencoder, tag self-attention encoder and the audio projection head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, functional as F, nn, rng as rngs

PATCH_FRAMES = 96
PATCH_BANDS = 96
MAX_TAGS = 10


@dataclass(frozen=True)
class AudioEncoderConfig:
    n_layers: int = 5
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    in_channels: int = 1
    channels: int = 128
    dropout: float = 0.25

    def spatial(self, n: int = PATCH_FRAMES) -> int:
        for _ in range(self.n_layers):
            n = (n + 2 * self.padding - self.kernel) // self.stride + 1
        return n

    @property
    def embedding_dim(self) -> int:
        return self.channels * self.spatial(PATCH_FRAMES) * self.spatial(PATCH_BANDS)


@dataclass(frozen=True)
class AttentionConfig:
    word_dim: int = 128
    heads: int = 1
    aggregation: str = "attention"
    max_tags: int = MAX_TAGS
    dropout: float = 0.1

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("need at least one attention head")
        if self.aggregation not in ("attention", "mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass(frozen=True)
class ModelConfig:
    audio: AudioEncoderConfig = AudioEncoderConfig()
    tags: AttentionConfig = AttentionConfig()

    @property
    def embedding_dim(self) -> int:
        return self.audio.embedding_dim

    @property
    def contrastive_dim(self) -> int:
        # the mean variant has no output map, so the shared space is the word space
        return self.tags.word_dim if self.tags.aggregation == "mean" else self.embedding_dim

    def to_dict(self) -> dict:
        return {"audio": asdict(self.audio), "tags": asdict(self.tags)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(AudioEncoderConfig(**d["audio"]), AttentionConfig(**d["tags"]))


VARIANTS = {
    f"w2v-{dim}-{tag}": (dim, heads, agg)
    for dim in (128, 1152)
    for tag, heads, agg in (("1h", 1, "attention"), ("4h", 4, "attention"), ("mean", 1, "mean"))
}


def variant_config(variant: str) -> ModelConfig:
    """Model configuration for a row label such as ``w2v-128-4h``."""
    try:
        dim, heads, agg = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
    return ModelConfig(tags=AttentionConfig(word_dim=dim, heads=heads, aggregation=agg))


class AudioEncoder(nn.Module):
    """Strided conv stack -> flatten -> layer norm."""

    def __init__(self, cfg: AudioEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.convs, self.norms, self.drops = [], [], []
        cin = cfg.in_channels
        for i in range(cfg.n_layers):
            conv = nn.Conv2d(cin, cfg.channels, cfg.kernel, cfg.stride, cfg.padding, rng)
            bn = nn.BatchNorm2d(cfg.channels)
            drop = nn.Dropout(cfg.dropout)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"bn{i}", bn)
            setattr(self, f"drop{i}", drop)
            self.convs.append(conv)
            self.norms.append(bn)
            self.drops.append(drop)
            cin = cfg.channels
        self.norm = nn.LayerNorm(cfg.embedding_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = F.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.shape[1:] != (self.cfg.in_channels, PATCH_FRAMES, PATCH_BANDS):
            raise ValueError(f"encoder expects (N, {PATCH_FRAMES}, {PATCH_BANDS}) patches, got {x.shape}")
        h = x
        for conv, bn, drop in zip(self.convs, self.norms, self.drops):
            h = drop(F.relu(bn(conv(h))))
        return self.norm(F.reshape(h, (h.shape[0], -1)))


class AudioDecoder(nn.Module):
    """Mirror of the encoder with transposed convs; the last layer ends in a sigmoid."""

    def __init__(self, cfg: AudioEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.side = cfg.spatial()
        self.convs, self.norms, self.drops = [], [], []
        for i in range(cfg.n_layers):
            cout = cfg.in_channels if i == cfg.n_layers - 1 else cfg.channels
            conv = nn.ConvTranspose2d(cfg.channels, cout, cfg.kernel, cfg.stride, cfg.padding, rng)
            bn = nn.BatchNorm2d(cout)
            drop = nn.Dropout(cfg.dropout)
            setattr(self, f"deconv{i}", conv)
            setattr(self, f"bn{i}", bn)
            setattr(self, f"drop{i}", drop)
            self.convs.append(conv)
            self.norms.append(bn)
            self.drops.append(drop)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.embedding_dim:
            raise ValueError(f"decoder expects (N, {self.cfg.embedding_dim}) embeddings, got {z.shape}")
        h = F.reshape(z, (z.shape[0], self.cfg.channels, self.side, self.side))
        last = len(self.convs) - 1
        for i, (conv, bn, drop) in enumerate(zip(self.convs, self.norms, self.drops)):
            h = bn(conv(drop(h)))
            h = F.sigmoid(h) if i == last else F.relu(h)
        return F.reshape(h, (h.shape[0], PATCH_FRAMES, PATCH_BANDS))


def canonical_tag_order(z_w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row order that puts valid tags first, sorted by embedding value.

    Attention plus summation is permutation invariant in exact arithmetic;
    feeding rows in a canonical order makes it invariant bit for bit too.
    """
    order = np.empty(mask.shape, dtype=np.int64)
    for b in range(mask.shape[0]):
        order[b] = sorted(range(mask.shape[1]), key=lambda i: (not mask[b, i], z_w[b, i].tolist()))
    return order


class TagAttention(nn.Module):
    """Multi-head scaled dot-product self-attention over a set of word embeddings.

    Each head has full-width query/key/value maps (``F_w -> F_w``); the heads
    are concatenated per tag, mapped to the contrastive space by a shared
    output map, summed over the valid tags and layer-normalised.
    """

    def __init__(self, cfg: AttentionConfig, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        width = cfg.heads * cfg.word_dim
        self.query = nn.Linear(cfg.word_dim, width, rng)
        self.key = nn.Linear(cfg.word_dim, width, rng)
        self.value = nn.Linear(cfg.word_dim, width, rng)
        self.out = nn.Linear(width, out_dim, rng)
        self.norm = nn.LayerNorm(out_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.last_attention: np.ndarray | None = None

    def _heads(self, t: Tensor, b: int, n: int) -> Tensor:
        return F.transpose(F.reshape(t, (b, n, self.cfg.heads, self.cfg.word_dim)), (0, 2, 1, 3))

    def forward(self, z_w: Tensor, mask: np.ndarray) -> Tensor:
        b, n, _ = z_w.shape
        h = self.drop(z_w)
        q = self._heads(self.query(h), b, n)
        k = self._heads(self.key(h), b, n)
        v = self._heads(self.value(h), b, n)
        scores = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.cfg.word_dim))
        att = F.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        self.last_attention = att.data
        o = F.reshape(F.transpose(F.matmul(att, v), (0, 2, 1, 3)), (b, n, -1))
        o = F.mul(self.out(o), mask[:, :, None].astype(o.dtype))
        return self.norm(F.sum(o, axis=1))


class TagMean(nn.Module):
    """Layer-normalised mean of the valid word embeddings (no attention)."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.word_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, z_w: Tensor, mask: np.ndarray) -> Tensor:
        m = mask.astype(z_w.dtype)
        total = F.sum(F.mul(self.drop(z_w), m[:, :, None]), axis=1)
        return self.norm(F.div(total, m.sum(axis=1, keepdims=True)))


class AlignmentModel(nn.Module):
    """Audio encoder/decoder, tag encoder and projection head, built from one seed."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = rngs.stream(seed, "init")
        self.encoder = AudioEncoder(cfg.audio, init)
        self.decoder = AudioDecoder(cfg.audio, init)
        if cfg.tags.aggregation == "mean":
            self.tag_encoder = TagMean(cfg.tags)
        else:
            self.tag_encoder = TagAttention(cfg.tags, cfg.contrastive_dim, init)
        self.projection = nn.Linear(cfg.embedding_dim, cfg.contrastive_dim, init)
        self.dropout_rng = rngs.stream(seed, "dropout")
        self.set_dropout_rng(self.dropout_rng)

    def encode_audio(self, x) -> Tensor:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self._dtype)))

    def decode_audio(self, z_a: Tensor) -> Tensor:
        return self.decoder(z_a)

    def project_audio(self, z_a: Tensor) -> Tensor:
        return self.projection(z_a)

    def attend_tags(self, z_w, mask) -> Tensor:
        z_w = np.asarray(z_w.data if isinstance(z_w, Tensor) else z_w, dtype=self._dtype)
        mask = np.asarray(mask, dtype=bool)
        if z_w.ndim == 2:
            z_w, mask = z_w[None], mask[None]
        if not mask.any(axis=1).all():
            raise ValueError("every tag set needs at least one valid tag")
        order = canonical_tag_order(z_w, mask)
        z_w = np.take_along_axis(z_w, order[:, :, None], axis=1)
        mask = np.take_along_axis(mask, order, axis=1)
        # valid rows now lead; slots padded in every row never contribute
        width = int(mask.sum(axis=1).max())
        z_w, mask = z_w[:, :width], mask[:, :width]
        return self.tag_encoder(Tensor(z_w), mask)

    def forward(self, x, z_w, mask):
        """Return ``(reconstruction, phi_audio, phi_tags, z_audio)`` for a batch."""
        z_a = self.encode_audio(x)
        return self.decode_audio(z_a), self.project_audio(z_a), self.attend_tags(z_w, mask), z_a

    @property
    def _dtype(self):
        return self.projection.weight.dtype

    def trainable_groups(self) -> dict[str, list]:
        return {name: getattr(self, name).parameters()
                for name in ("encoder", "decoder", "tag_encoder", "projection")}
