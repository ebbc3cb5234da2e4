"""Full network assembly: embed, encode, attend, re-encode, predict.

One embedding encoder runs over both context and question with shared
parameters. The attention output feeds a single model-encoder stack applied
three times in sequence (again shared), producing M0, M1, M2; the span head
reads [M0; M1] for starts and [M0; M2] for ends.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attention import CqAttentionParams, cq_attention_forward, init_cq_attention
from .data import Batch, QaExample
from .embedding import EmbeddingParams, embed, init_embedding_params
from .encoder import EncoderBlockConfig, EncoderStackParams, encoder_stack_forward, init_encoder_stack
from .span import (
    SpanDistributions, SpanHeadParams, SpanPrediction, dp_span_inference,
    init_span_head, span_distributions, span_loss,
)
from .tensor import Tensor, no_grad


@dataclass
class ModelConfig:
    hidden_dim: int = 128
    num_heads: int = 8
    word_dim: int = 300
    char_dim: int = 200
    char_limit: int = 16
    char_kernel: int = 5
    emb_enc_blocks: int = 1
    emb_enc_convs: int = 4
    emb_enc_kernel: int = 7
    model_enc_blocks: int = 7
    model_enc_convs: int = 2
    model_enc_kernel: int = 5
    dropout: float = 0.1
    word_dropout: float = 0.1
    char_dropout: float = 0.05
    survival_end: float = 0.9
    max_context_len: int = 400
    max_answer_len: int = 30

    def __post_init__(self):
        # Delegated checks: both stack configs validate head divisibility
        # and kernel parity on construction.
        self.embedding_encoder()
        self.model_encoder()
        if self.char_kernel % 2 == 0:
            raise ValueError(f"char kernel must be odd, got {self.char_kernel}")

    def embedding_encoder(self) -> EncoderBlockConfig:
        return EncoderBlockConfig(
            num_blocks=self.emb_enc_blocks, num_conv_layers=self.emb_enc_convs,
            kernel_size=self.emb_enc_kernel, hidden_dim=self.hidden_dim,
            num_heads=self.num_heads, dropout=self.dropout,
            survival_end=self.survival_end)

    def model_encoder(self) -> EncoderBlockConfig:
        return EncoderBlockConfig(
            num_blocks=self.model_enc_blocks, num_conv_layers=self.model_enc_convs,
            kernel_size=self.model_enc_kernel, hidden_dim=self.hidden_dim,
            num_heads=self.num_heads, dropout=self.dropout,
            survival_end=self.survival_end)


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    emb_encoder: EncoderStackParams
    cq: CqAttentionParams
    model_encoder: EncoderStackParams
    span: SpanHeadParams


def init_model_params(config: ModelConfig, word_matrix: np.ndarray,
                      char_vocab_size: int, rng) -> ModelParams:
    if word_matrix.shape[1] != config.word_dim:
        raise ValueError(
            f"word vectors are {word_matrix.shape[1]}-dim, config says {config.word_dim}")
    return ModelParams(
        embedding=init_embedding_params(
            word_matrix, char_vocab_size, config.char_dim, config.char_kernel,
            config.hidden_dim, rng),
        emb_encoder=init_encoder_stack(config.embedding_encoder(), rng),
        cq=init_cq_attention(config.hidden_dim, rng),
        model_encoder=init_encoder_stack(config.model_encoder(), rng),
        span=init_span_head(config.hidden_dim, rng))


def named_tensors(params, trainable_only: bool = True) -> list[tuple[str, Tensor]]:
    """Flatten a params tree into (dotted name, tensor) pairs, field order."""
    out = []

    def walk(prefix, node):
        if isinstance(node, Tensor):
            if node.requires_grad or not trainable_only:
                out.append((prefix, node))
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                walk(f"{prefix}.{f.name}" if prefix else f.name,
                     getattr(node, f.name))
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(f"{prefix}.{i}", item)

    walk("", params)
    return out


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Trainable tensors only; the frozen word table never appears."""
    return named_tensors(params, trainable_only=True)


def model_forward(params: ModelParams, config: ModelConfig, batch: Batch,
                  train_mode: bool = False, rng=None) -> SpanDistributions:
    emb_cfg = config.embedding_encoder()
    model_cfg = config.model_encoder()

    def side(word_ids, char_ids, mask):
        x = embed(params.embedding, word_ids, char_ids,
                  word_dropout=config.word_dropout,
                  char_dropout=config.char_dropout,
                  train_mode=train_mode, rng=rng)
        return encoder_stack_forward(x, emb_cfg, params.emb_encoder, mask,
                                     train_mode=train_mode, rng=rng)

    context = side(batch.context_ids, batch.context_chars, batch.context_mask)
    question = side(batch.question_ids, batch.question_chars, batch.question_mask)
    x = cq_attention_forward(context, question, params.cq,
                             batch.context_mask, batch.question_mask)
    stacked = [x]
    for _ in range(3):
        stacked.append(encoder_stack_forward(
            stacked[-1], model_cfg, params.model_encoder, batch.context_mask,
            train_mode=train_mode, rng=rng))
    M0, M1, M2 = stacked[1], stacked[2], stacked[3]
    return span_distributions(M0, M1, M2, params.span.w1, params.span.w2,
                              batch.context_mask)


def model_loss(params: ModelParams, config: ModelConfig, batch: Batch,
               train_mode: bool = False, rng=None) -> tuple[Tensor, SpanDistributions]:
    dist = model_forward(params, config, batch, train_mode=train_mode, rng=rng)
    spans = np.asarray(batch.spans)
    loss = span_loss(dist, spans[:, 0], spans[:, 1])
    return loss, dist


def predict_spans(params: ModelParams, config: ModelConfig,
                  batch: Batch) -> list[SpanPrediction]:
    """Evaluation-mode argmax spans, one per batch row."""
    with no_grad():
        dist = model_forward(params, config, batch, train_mode=False)
    p1 = dist.p1.data
    p2 = dist.p2.data
    out = []
    for i in range(batch.size):
        n_real = int(batch.context_mask[i].sum())
        out.append(dp_span_inference(p1[i, :n_real], p2[i, :n_real],
                                     max_len=config.max_answer_len))
    return out


def span_text(example: QaExample, start: int, end: int) -> str:
    """Recover the answer string for a token span from stored offsets."""
    lo = example.char_offsets[start][0]
    hi = example.char_offsets[end][1]
    return example.context_text[lo:hi]
