"""The entity-typing classifier: mention encoder, context encoder, concat, MLR.

Each of the four components (encoder, attention, concat, mlr) runs in its own
geometry. Wherever two neighbouring components disagree, values are moved
across with :func:`~hypertype.layers.to_euclidean` /
:func:`~hypertype.layers.to_hyperbolic`:

* encoder -> attention: word-FFNN states, char-RNN states, merged GRU states
* attention -> concat: the three pooled vectors
* concat -> mlr: the final representation

The per-token merge of the two GRU directions is part of the encoder; the
uniform midpoint over char states is part of the attention component.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import layers as L
from .autodiff import Parameter, use
from .config import ComponentSpaceConfig, ModelConfig
from .data import OOV, Batch, TypedExample, Vocab, init_parameters, make_batch
from .layers import SpaceTag


def expected_crossings(spaces: ComponentSpaceConfig) -> int:
    """Bridge-map calls made by one forward pass under ``spaces``."""
    return (
        3 * (spaces.encoder != spaces.attention)
        + 3 * (spaces.attention != spaces.concat)
        + (spaces.concat != spaces.mlr)
    )


@dataclass
class Forward:
    logits: object
    final: object
    mention: object
    chars: object
    context: object


class Classifier:
    """Full model over a fixed word table (frozen) and trainable parameters.

    ``word_vectors`` must already live in the encoder's space (see
    :meth:`hypertype.data.EmbeddingTable.for_space`).
    """

    def __init__(
        self,
        config: ModelConfig,
        spaces: ComponentSpaceConfig,
        params: dict[str, Parameter],
        word_vectors: np.ndarray,
        words: Vocab,
        chars: Vocab,
        max_chars: int = 25,
        max_context_len: int = 100,
    ):
        config.validate()
        word_vectors = np.asarray(word_vectors, dtype=np.float64)
        if word_vectors.shape != (config.vocab_size, config.word_dim):
            raise ValueError(
                f"word table has shape {word_vectors.shape}, expected {(config.vocab_size, config.word_dim)}"
            )
        if len(words) != config.vocab_size or len(chars) != config.char_vocab_size:
            raise ValueError("vocabulary sizes do not match the model config")
        self.config = config
        self.spaces = spaces
        self.params = params
        self.word_vectors = word_vectors
        self.words = words
        self.chars = chars
        self.max_chars = max_chars
        self.max_context_len = max_context_len
        self._check_shapes()
        self._build_layers()

    # ----------------------------------------------------------- structure

    def _check_shapes(self):
        reference = init_parameters(self.config, self.spaces, seed=0)
        missing = sorted(set(reference) - set(self.params))
        extra = sorted(set(self.params) - set(reference))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, ref in reference.items():
            p = self.params[name]
            if p.value.shape != ref.value.shape:
                raise ValueError(f"parameter {name} has shape {p.value.shape}, expected {ref.value.shape}")
            if p.manifold != ref.manifold:
                raise ValueError(f"parameter {name} is {p.manifold}, the config needs {ref.manifold}")

    def _build_layers(self):
        p, cfg, s = self.params, self.config, self.spaces
        enc, att = s.encoder, s.attention
        self.mention_ffnn = L.FeedForward(p["mention.ffnn.weight"], p["mention.ffnn.bias"], cfg.mention_nonlinearity, enc)
        self.char_rnn = L.RNNCell(p["char.rnn.W"], p["char.rnn.U"], p["char.rnn.bias"], cfg.char_nonlinearity, enc)

        def gru(prefix):
            return L.GRUCell(
                *(p[prefix + k] for k in ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W", "U", "bias")), space=enc
            )

        self.gru_fwd = gru("context.fwd.")
        self.gru_bwd = gru("context.bwd.")
        self.merge = L.Concat([p["context.merge.M1"], p["context.merge.M2"]], p["context.merge.bias"], enc)

        def attn(prefix):
            return L.DistanceAttention(
                p[prefix + "W_q"], p[prefix + "b_q"], p[prefix + "W_k"], p[prefix + "b_k"],
                p[prefix + "beta"], p[prefix + "positions"], att,
            )

        self.mention_attn = attn("mention.attn.")
        self.context_attn = attn("context.attn.")
        self.concat = L.Concat(
            [p["concat.M_mention"], p["concat.M_char"], p["concat.M_context"]], p["concat.bias"], s.concat
        )
        self.mlr = L.MLR(p["mlr.p"], p["mlr.a"], s.mlr)

    # --------------------------------------------------------------- pieces

    def batch(self, examples: Sequence[TypedExample]) -> Batch:
        return make_batch(
            examples, self.words, self.chars, self.config.num_labels,
            self.config.max_mention_len, self.max_chars, self.max_context_len, self.config.max_rel,
        )

    def _word_inputs(self, ids, rng):
        vecs = self.word_vectors[ids]
        is_oov = ids == OOV
        if np.any(is_oov):
            vecs = ad.where(is_oov[..., None], use(self.params["word.oov"]), vecs)
        return L.dropout(vecs, self.config.dropout_input, rng, self.spaces.encoder, whole_vectors=True)

    def _mention_states(self, batch: Batch, rng):
        return L.ffnn_forward(self.mention_ffnn, self._word_inputs(batch.mention_ids, rng))

    def _char_states(self, batch: Batch):
        emb = ad.take(use(self.params["char.embedding"]), batch.char_ids)
        return L.run_rnn(self.char_rnn, emb, batch.char_mask)

    def _context_states(self, batch: Batch, rng):
        inputs = self._word_inputs(batch.context_ids, rng)
        return L.bidirectional_gru(self.gru_fwd, self.gru_bwd, self.merge, inputs, batch.context_mask)

    def _pool(self, batch: Batch, mention_states, char_states, context_states):
        enc, att = self.spaces.encoder, self.spaces.attention
        mention_states = L.convert(mention_states, enc, att)
        char_states = L.convert(char_states, enc, att)
        context_states = L.convert(context_states, enc, att)
        m = L.attention(self.mention_attn, mention_states, batch.mention_pos, batch.mention_mask)
        c = L.mean(char_states, att, batch.char_mask)
        s = L.attention(self.context_attn, context_states, batch.context_pos, batch.context_mask)
        return m, c, s

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> Forward:
        """Logits (B, K) for a batch; ``rng`` enables dropout (training)."""
        att, cat, mlr = self.spaces.attention, self.spaces.concat, self.spaces.mlr
        m, c, s = self._pool(batch, self._mention_states(batch, rng), self._char_states(batch), self._context_states(batch, rng))
        parts = [L.convert(v, att, cat) for v in (m, c, s)]
        final = L.concat(self.concat, parts)
        final = L.dropout(final, self.config.dropout_concat, rng, cat)
        final = L.convert(final, cat, mlr)
        return Forward(L.mlr_logits(self.mlr, final), final, m, c, s)

    # ------------------------------------------------------- per example API

    def encode_mention(self, example: TypedExample):
        """(word-level vector in D^{d_M}, char-level vector in D^{d_C}), in the attention space."""
        batch = self.batch([example])
        enc, att = self.spaces.encoder, self.spaces.attention
        states = L.convert(self._mention_states(batch, None), enc, att)
        m = L.attention(self.mention_attn, states, batch.mention_pos, batch.mention_mask)
        c = L.mean(L.convert(self._char_states(batch), enc, att), att, batch.char_mask)
        return ad.value_of(m)[0], ad.value_of(c)[0]

    def encode_context(self, example: TypedExample):
        batch = self.batch([example])
        states = L.convert(self._context_states(batch, None), self.spaces.encoder, self.spaces.attention)
        s = L.attention(self.context_attn, states, batch.context_pos, batch.context_mask)
        return ad.value_of(s)[0]

    def classify(self, example: TypedExample) -> np.ndarray:
        return np.asarray(ad.value_of(self.forward(self.batch([example])).logits))[0]

    def predict(self, examples: Sequence[TypedExample], batch_size: int = 256) -> list[set[int]]:
        out = []
        for lo in range(0, len(examples), batch_size):
            logits = np.asarray(ad.value_of(self.forward(self.batch(examples[lo : lo + batch_size])).logits))
            out.extend(L.multilabel_predict(row) for row in logits)
        return out

    def logits(self, examples: Sequence[TypedExample], batch_size: int = 256) -> np.ndarray:
        rows = [
            np.asarray(ad.value_of(self.forward(self.batch(examples[lo : lo + batch_size])).logits))
            for lo in range(0, len(examples), batch_size)
        ]
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.config.num_labels))

    def text_vector_norms(self, examples: Sequence[TypedExample], batch_size: int = 256) -> np.ndarray:
        out = []
        for lo in range(0, len(examples), batch_size):
            final = np.asarray(ad.value_of(self.forward(self.batch(examples[lo : lo + batch_size])).final))
            out.append(final_norm(final, self.spaces.mlr))
        return np.concatenate(out) if out else np.zeros(0)

    def text_vector_norm(self, example: TypedExample) -> float:
        return float(self.text_vector_norms([example])[0])


def final_norm(final: np.ndarray, space: SpaceTag) -> np.ndarray:
    """Distance from the origin of each final representation (row-wise)."""
    final = np.asarray(final, dtype=np.float64)
    if space == SpaceTag.HYPERBOLIC:
        return geo.distance(np.zeros_like(final), final)
    return np.linalg.norm(final, axis=-1)
