"""Utterance encoder, per-slot gate, and copy-augmented value generator.

Prediction runs the pipeline context -> embed -> (optional LM fusion) ->
bi-GRU encoder -> per-slot decoding in ontology order. Each decode step
mixes a vocabulary softmax (tied to the embedding table) with the attention
distribution over context positions, weighted by a learned p_gen. Tokens
that are out of vocabulary but present in the context get temporary
extended ids (one per distinct surface form), so copying can emit surface
forms the vocabulary has never seen.

Turn instances of a micro-batch run through stacked graphs (one embedding
table build, masked batched recurrences, one decoder GRU step for all
slots of all examples) purely for throughput; attention, copy mixtures and
losses stay per example, so results are independent of the batching. Slots
never interact either: rows of the decode batch are equivalent to decoding
each slot independently in ontology order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .context import EOS, UNK, Vocabulary, build_context, tokenize
from .corpus import BeliefState, Dialogue, Ontology
from .embeddings import CompositeEmbedding
from .lm import LanguageModel

GATE_CLASSES = ("ptr", "none", "dontcare")
GATE_PTR, GATE_NONE, GATE_DONTCARE = 0, 1, 2

DEFAULT_MAX_VALUE_LEN = 10


@dataclass
class EncoderOutput:
    hiddens: ad.Node      # T x d_h (forward + backward states)
    final_state: ad.Node  # 1 x d_h (sum of directional finals)


@dataclass
class SlotGateDecision:
    probs: np.ndarray  # over GATE_CLASSES, sums to 1

    @property
    def label(self) -> str:
        return GATE_CLASSES[int(np.argmax(self.probs))]


@dataclass
class GeneratorStep:
    vocab_distribution: ad.Node    # S x |V|
    context_distribution: ad.Node  # S x T
    p_gen: ad.Node                 # S x 1
    final_distribution: ad.Node    # S x (|V| + n_oov); always a simplex


@dataclass
class TurnContext:
    """Everything decoding needs for one (dialogue, turn) instance."""

    tokens: list[str]
    ids: np.ndarray          # vocabulary ids (OOV -> UNK)
    ext_ids: np.ndarray      # extended ids (OOV -> |V| + surface index)
    oov_surfaces: list[str]  # distinct OOV surfaces, first-appearance order
    untagged_length: int
    encoder: EncoderOutput
    hiddens_t: ad.Node       # cached transpose of encoder hiddens
    example_index: int
    batch: "BatchContext"
    gen_steps: list[GeneratorStep] = field(default_factory=list)

    @property
    def n_oov(self) -> int:
        return len(self.oov_surfaces)


@dataclass
class BatchContext:
    contexts: list[TurnContext]
    table: ad.Node       # |V| x emb
    table_t: ad.Node     # emb x |V|
    final_all: ad.Node   # B x d_h, one encoder final state per example
    lm_loss_sum: ad.Node  # scalar, summed over the batch (0 when disabled)


def extend_context_ids(vocab: Vocabulary, tokens: list[str]):
    """Vocabulary ids plus per-surface extended ids for OOV context tokens."""
    unk = vocab.id(UNK)
    ids, ext_ids, surfaces = [], [], []
    ext_of: dict[str, int] = {}
    for tok in tokens:
        if tok in vocab:
            i = vocab.id(tok)
            ids.append(i)
            ext_ids.append(i)
        else:
            ids.append(unk)
            if tok not in ext_of:
                ext_of[tok] = len(vocab) + len(surfaces)
                surfaces.append(tok)
            ext_ids.append(ext_of[tok])
    return np.array(ids, dtype=np.intp), np.array(ext_ids, dtype=np.intp), surfaces


def copy_mixture(vocab_probs: ad.Node, context_probs: ad.Node, p_gen: ad.Node,
                 context_ext_ids, vocab_size: int, n_oov: int) -> ad.Node:
    """p_gen * vocab distribution + (1 - p_gen) * scattered copy distribution.

    The result has ``vocab_size + n_oov`` columns and sums to 1 per row for
    any inputs that are themselves simplexes and any p_gen in [0, 1].
    """
    gen = ad.elementwise_mul(vocab_probs, p_gen)
    if n_oov:
        gen = ad.pad_cols(gen, n_oov)
    copy = ad.scatter_cols(context_probs, context_ext_ids, vocab_size + n_oov)
    keep = ad.add(ad.scale(p_gen, -1.0), ad.Node(1.0))
    return ad.add(gen, ad.elementwise_mul(copy, keep))


class Encoder:
    """Bi-GRU utterance encoder over the (fused) embedded context."""

    def __init__(self, store: ad.ParameterStore, input_dim: int, hidden_dim: int):
        self.fwd = ad.GruCell(store, "enc.fwd", input_dim, hidden_dim)
        self.bwd = ad.GruCell(store, "enc.bwd", input_dim, hidden_dim)

    def forward(self, x: ad.Node) -> EncoderOutput:
        if x.value.ndim != 2 or x.shape[0] < 1:
            raise ad.ShapeError(f"encode: need a non-empty T x d input, got {x.shape}")
        f = self.fwd.sequence(x)
        b = self.bwd.sequence(x, reverse=True)
        final = ad.add(ad.row(f, -1), ad.row(b, 0))
        return EncoderOutput(ad.add(f, b), final)


class DstModel:
    """TRADE-style state generator with optional tagging and LM fusion."""

    def __init__(self, vocab: Vocabulary, ontology: Ontology, *,
                 hidden_dim: int = 400, embedding_dim: int = 400,
                 tagging: bool = True, lm_enabled: bool = True,
                 dropout: float = 0.2, word_dropout: float = 0.15,
                 max_value_len: int = DEFAULT_MAX_VALUE_LEN,
                 freeze_word_embeddings: bool = False, seed: int = 0):
        if hidden_dim != embedding_dim:
            raise ValueError("hidden_dim must equal embedding_dim (states are summed "
                             f"with embeddings); got {hidden_dim} vs {embedding_dim}")
        self.vocab = vocab
        self.ontology = ontology
        self.hidden_dim = hidden_dim
        self.embedding_dim = embedding_dim
        self.tagging = tagging
        self.lm_enabled = lm_enabled
        self.dropout = dropout
        self.word_dropout = word_dropout
        self.max_value_len = max_value_len

        self.store = ad.ParameterStore(seed)
        self.embedding = CompositeEmbedding(
            self.store, vocab, embedding_dim=embedding_dim, hidden_dim=hidden_dim,
            freeze_word=freeze_word_embeddings)
        self.lm = LanguageModel(self.store, embedding_dim, hidden_dim, len(vocab))
        self.encoder = Encoder(self.store, embedding_dim, hidden_dim)
        self.decoder_cell = ad.GruCell(self.store, "dec", embedding_dim, hidden_dim)
        bound = 1.0 / np.sqrt(hidden_dim)
        self.w_gate = self.store.new("dec.w_gate", (hidden_dim, 3), bound)
        self.b_gate = self.store.new("dec.b_gate", (3,), bound)
        self.w_pgen = self.store.new("dec.w_pgen", (2 * hidden_dim + embedding_dim, 1), bound)
        self.b_pgen = self.store.new("dec.b_pgen", (1,), bound)

        # Row s averages the embedding rows of slot s's domain and slot-name
        # tokens (so the first decoder input is domain emb + slot emb).
        m = np.zeros((len(ontology), len(vocab)))
        for s, (domain, slot) in enumerate(ontology.domain_slots):
            for name in (domain, slot):
                ids = vocab.encode(tokenize(name))
                for i in ids:
                    m[s, i] += 1.0 / len(ids)
        self._slot_token_avg = m

    # -- forward pieces ----------------------------------------------------

    def prepare_batch(self, instances: list[tuple[Dialogue, int]],
                      rng: np.random.Generator | None = None) -> BatchContext:
        """Context -> embeddings -> optional LM -> encoder for a batch.

        Passing ``rng`` enables training-time dropout (embedding rows,
        encoder outputs) and word dropout on the embedding input ids.
        """
        if not instances:
            raise ValueError("prepare_batch: empty instance list")
        tokens_per: list[list[str]] = []
        ids_per, ext_per, oov_per = [], [], []
        for dialogue, turn in instances:
            seq = build_context(dialogue, turn, self.tagging)
            if not seq.tokens:
                raise ad.ShapeError(
                    f"empty context for dialogue {dialogue.id} turn {turn}")
            ids, ext_ids, oov = extend_context_ids(self.vocab, seq.tokens)
            tokens_per.append(seq.tokens)
            ids_per.append(ids)
            ext_per.append(ext_ids)
            oov_per.append((oov, seq.untagged_length))
        lengths = [len(t) for t in tokens_per]
        offsets = np.concatenate([[0], np.cumsum(lengths)])[:-1]
        ids_all = np.concatenate(ids_per)

        embed_ids = ids_all
        if rng is not None and self.word_dropout > 0:
            drop = rng.random(ids_all.size) < self.word_dropout
            if drop.any():
                embed_ids = np.where(drop, self.vocab.id(UNK), ids_all)

        table = self.embedding.table()
        table_t = ad.transpose(table)
        emb = self.embedding.embed_ids(table, embed_ids)
        if rng is not None and self.dropout > 0:
            mask = (rng.random(emb.shape) >= self.dropout) / (1.0 - self.dropout)
            emb = ad.elementwise_mul(emb, ad.Node(mask))

        if self.lm_enabled:
            f = ad.gru_sequence_batch(self.lm.fwd, emb, lengths)
            b = ad.gru_sequence_batch(self.lm.bwd, emb, lengths, reverse=True)
            rows_f = np.concatenate([off + np.arange(n - 1)
                                     for off, n in zip(offsets, lengths)]).astype(np.intp)
            if rows_f.size:
                next_ce = ad.cross_entropy_rows(
                    ad.matmul(ad.embedding_lookup(f, rows_f), self.lm.w_f.node),
                    ids_all[rows_f + 1])
                prev_ce = ad.cross_entropy_rows(
                    ad.matmul(ad.embedding_lookup(b, rows_f + 1), self.lm.w_b.node),
                    ids_all[rows_f])
                lm_sum = ad.add(next_ce, prev_ce)
            else:
                lm_sum = ad.Node(0.0)
            fused = ad.add(emb, ad.add(f, b))
        else:
            lm_sum = ad.Node(0.0)
            fused = emb

        enc_f = ad.gru_sequence_batch(self.encoder.fwd, fused, lengths)
        enc_b = ad.gru_sequence_batch(self.encoder.bwd, fused, lengths, reverse=True)
        hiddens_all = ad.add(enc_f, enc_b)
        last_rows = np.array([off + n - 1 for off, n in zip(offsets, lengths)], dtype=np.intp)
        first_rows = offsets.astype(np.intp)
        final_all = ad.add(ad.embedding_lookup(enc_f, last_rows),
                           ad.embedding_lookup(enc_b, first_rows))
        if rng is not None and self.dropout > 0:
            mask = (rng.random(hiddens_all.shape) >= self.dropout) / (1.0 - self.dropout)
            hiddens_all = ad.elementwise_mul(hiddens_all, ad.Node(mask))

        batch = BatchContext([], table, table_t, final_all, lm_sum)
        for i, (off, n) in enumerate(zip(offsets, lengths)):
            hiddens = ad.slice_rows(hiddens_all, int(off), int(off + n))
            enc = EncoderOutput(hiddens, ad.slice_rows(final_all, i, i + 1))
            oov, untagged = oov_per[i]
            batch.contexts.append(TurnContext(
                tokens_per[i], ids_per[i], ext_per[i], oov, untagged,
                enc, ad.transpose(hiddens), i, batch))
        return batch

    def prepare_turn(self, dialogue: Dialogue, turn: int,
                     rng: np.random.Generator | None = None) -> TurnContext:
        """Single-instance convenience wrapper around :meth:`prepare_batch`."""
        return self.prepare_batch([(dialogue, turn)], rng).contexts[0]

    def _attend_and_mix(self, ctx: TurnContext, h_i: ad.Node, x_i: ad.Node,
                        vocab_probs_i: ad.Node):
        """Attention, p_gen and the copy mixture for one example's slot rows."""
        attn = ad.softmax(ad.matmul(h_i, ctx.hiddens_t), axis=1)
        context_vec = ad.matmul(attn, ctx.encoder.hiddens)
        p_gen = ad.sigmoid(ad.add(
            ad.matmul(ad.concat(ad.concat(h_i, context_vec, axis=1), x_i, axis=1),
                      self.w_pgen.node),
            self.b_pgen.node))
        final = copy_mixture(vocab_probs_i, attn, p_gen, ctx.ext_ids,
                             len(self.vocab), ctx.n_oov)
        step = GeneratorStep(vocab_probs_i, attn, p_gen, final)
        ctx.gen_steps.append(step)
        return context_vec, step

    def _gate_logits(self, context_vec: ad.Node) -> ad.Node:
        return ad.add(ad.matmul(context_vec, self.w_gate.node), self.b_gate.node)

    def _slot_inputs(self, table: ad.Node, slot_rows: list[int] | None = None) -> ad.Node:
        m = self._slot_token_avg if slot_rows is None else self._slot_token_avg[slot_rows]
        return ad.matmul(ad.Node(m), table)

    def _decoder_init(self, batch: BatchContext, slot_rows: list[int]):
        """Stacked first inputs (slot embeddings) and initial states (tiled
        encoder finals) for all examples' slot rows, example-major."""
        n_b, n_s = len(batch.contexts), len(slot_rows)
        x = ad.embedding_lookup(self._slot_inputs(batch.table, slot_rows),
                                np.tile(np.arange(n_s), n_b))
        h = ad.embedding_lookup(batch.final_all, np.repeat(np.arange(n_b), n_s))
        return x, h

    # -- training ----------------------------------------------------------

    def gate_label(self, gold: BeliefState, domain: str, slot: str) -> int:
        value = gold.get(domain, slot)
        if value is None:
            return GATE_NONE
        return GATE_DONTCARE if value == "dontcare" else GATE_PTR

    def _target_ids(self, ctx: TurnContext, gold: BeliefState):
        """Teacher-forcing targets per ontology slot: value tokens + EOS for
        ptr slots, ["dontcare", EOS] for dontcare, [EOS] for absent."""
        ext_of = {s: len(self.vocab) + i for i, s in enumerate(ctx.oov_surfaces)}
        unk, eos = self.vocab.id(UNK), self.vocab.id(EOS)
        seqs, gates = [], []
        for domain, slot in self.ontology.domain_slots:
            gate = self.gate_label(gold, domain, slot)
            gates.append(gate)
            if gate == GATE_NONE:
                words = []
            elif gate == GATE_DONTCARE:
                words = ["dontcare"]
            else:
                words = tokenize(gold.get(domain, slot))
            ids = [self.vocab.id(t) if t in self.vocab else ext_of.get(t, unk)
                   for t in words]
            seqs.append((ids + [eos])[:self.max_value_len])
        max_len = max(len(s) for s in seqs)
        n = len(seqs)
        targets = np.zeros((n, max_len), dtype=np.intp)
        mask = np.zeros((n, max_len))
        for i, s in enumerate(seqs):
            targets[i, :len(s)] = s
            mask[i, :len(s)] = 1.0
        return targets, mask, np.array(gates, dtype=np.intp)

    def batch_loss(self, instances: list[tuple[Dialogue, int]],
                   rng: np.random.Generator | None = None) -> tuple[ad.Node, ad.Node]:
        """(sum of per-turn state-tracking losses, sum of per-turn LM losses).

        Per turn, the state-tracking term is the summed token cross entropy
        plus the gate cross entropy, averaged over the turn's slot instances;
        the LM term is the per-sequence sum. Callers divide by the batch size.
        """
        batch = self.prepare_batch(instances, rng)
        n_b, n_s = len(instances), len(self.ontology)
        per_example = []
        max_len = 0
        for ctx, (dialogue, turn) in zip(batch.contexts, instances):
            targets, mask, gates = self._target_ids(ctx, dialogue.turns[turn].gold_state)
            per_example.append((targets, mask, gates))
            max_len = max(max_len, targets.shape[1])

        x, h = self._decoder_init(batch, list(range(n_s)))
        unk, eos = self.vocab.id(UNK), self.vocab.id(EOS)
        token_total: ad.Node | None = None
        gate_total: ad.Node | None = None
        for j in range(max_len):
            h = self.decoder_cell.step(x, h)
            vocab_probs_all = ad.softmax(ad.matmul(h, batch.table_t), axis=1)
            prev_ids = np.full(n_b * n_s, eos, dtype=np.intp)
            for i, ctx in enumerate(batch.contexts):
                targets, mask, gates = per_example[i]
                h_i = ad.slice_rows(h, i * n_s, (i + 1) * n_s)
                x_i = ad.slice_rows(x, i * n_s, (i + 1) * n_s)
                vp_i = ad.slice_rows(vocab_probs_all, i * n_s, (i + 1) * n_s)
                context_vec, step = self._attend_and_mix(ctx, h_i, x_i, vp_i)
                if j == 0:
                    ce = ad.cross_entropy_rows(self._gate_logits(context_vec), gates)
                    gate_total = ce if gate_total is None else ad.add(gate_total, ce)
                if j < targets.shape[1]:
                    nll = ad.nll_rows(step.final_distribution, targets[:, j], mask[:, j])
                    token_total = nll if token_total is None else ad.add(token_total, nll)
                    ids = targets[:, j]
                    prev_ids[i * n_s:(i + 1) * n_s] = np.where(
                        ids >= len(self.vocab), unk, ids)  # OOV feeds UNK back
            if j + 1 < max_len:
                x = self.embedding.embed_ids(batch.table, prev_ids)
        dst_sum = ad.scale(ad.add(token_total, gate_total), 1.0 / n_s)
        return dst_sum, batch.lm_loss_sum

    def turn_loss(self, dialogue: Dialogue, turn: int,
                  rng: np.random.Generator | None = None) -> tuple[ad.Node, ad.Node]:
        """(state-tracking loss, LM loss) for a single turn instance."""
        return self.batch_loss([(dialogue, turn)], rng)

    def dst_loss(self, instances: list[tuple[Dialogue, int]],
                 rng: np.random.Generator | None = None) -> ad.Node:
        """Mean state-tracking loss over a batch of (dialogue, turn) pairs."""
        if not instances:
            raise ValueError("dst_loss: empty batch")
        dst_sum, _ = self.batch_loss(instances, rng)
        return ad.scale(dst_sum, 1.0 / len(instances))

    # -- inference ---------------------------------------------------------

    def _token_for(self, ctx: TurnContext, idx: int) -> str:
        if idx < len(self.vocab):
            return self.vocab.token(idx)
        return ctx.oov_surfaces[idx - len(self.vocab)]

    def _greedy_decode(self, batch: BatchContext, slot_rows: list[int],
                       max_len: int):
        """Greedy decoding of ``slot_rows`` for every example in the batch.

        Returns per-example ([SlotGateDecision, ...], [token list, ...]).
        Argmax ties break toward the lowest token id.
        """
        n_b, n_s = len(batch.contexts), len(slot_rows)
        eos, unk = self.vocab.id(EOS), self.vocab.id(UNK)
        x, h = self._decoder_init(batch, slot_rows)
        gates: list[list[SlotGateDecision]] = [[] for _ in range(n_b)]
        words: list[list[list[str]]] = [[[] for _ in range(n_s)] for _ in range(n_b)]
        done = np.zeros((n_b, n_s), dtype=bool)
        for j in range(max_len):
            h = self.decoder_cell.step(x, h)
            vocab_probs_all = ad.softmax(ad.matmul(h, batch.table_t), axis=1)
            prev_ids = np.full(n_b * n_s, eos, dtype=np.intp)
            for i, ctx in enumerate(batch.contexts):
                h_i = ad.slice_rows(h, i * n_s, (i + 1) * n_s)
                x_i = ad.slice_rows(x, i * n_s, (i + 1) * n_s)
                vp_i = ad.slice_rows(vocab_probs_all, i * n_s, (i + 1) * n_s)
                context_vec, step = self._attend_and_mix(ctx, h_i, x_i, vp_i)
                if j == 0:
                    probs = ad.softmax(self._gate_logits(context_vec), axis=1).value
                    gates[i] = [SlotGateDecision(p.copy()) for p in probs]
                choice = np.argmax(step.final_distribution.value, axis=1)
                for s in range(n_s):
                    if done[i, s]:
                        continue
                    c = int(choice[s])
                    if c == eos:
                        done[i, s] = True
                    else:
                        words[i][s].append(self._token_for(ctx, c))
                        prev_ids[i * n_s + s] = c if c < len(self.vocab) else unk
            if done.all():
                break
            x = self.embedding.embed_ids(batch.table, prev_ids)
        return gates, words

    def decode_slot(self, slot: tuple[str, str], ctx: TurnContext,
                    max_len: int | None = None) -> tuple[SlotGateDecision, list[str]]:
        """Gate decision and greedy value tokens for one (domain, slot)."""
        if max_len is not None and max_len < 1:
            raise ValueError("max_len must be >= 1")
        try:
            row_i = self.ontology.domain_slots.index(tuple(slot))
        except ValueError:
            raise KeyError(f"unknown slot {slot!r}") from None
        gates, words = self._greedy_decode(ctx.batch, [row_i],
                                           max_len or self.max_value_len)
        i = ctx.example_index
        return gates[i][0], words[i][0]

    def _assemble_state(self, gates: list[SlotGateDecision],
                        words: list[list[str]]) -> BeliefState:
        state = BeliefState()
        for (domain, slot), gate, toks in zip(self.ontology.domain_slots, gates, words):
            label = gate.label
            if label == "none":
                continue
            if label == "dontcare":
                state.set(domain, slot, "dontcare")
                continue
            value = " ".join(toks)
            if value and value != "none":
                state.set(domain, slot, value)
        return state

    def predict_states(self, instances: list[tuple[Dialogue, int]]) -> list[BeliefState]:
        """Greedy predictions for a batch of turns (all slots, fixed order)."""
        with ad.no_grad():
            batch = self.prepare_batch(instances)
            gates, words = self._greedy_decode(
                batch, list(range(len(self.ontology))), self.max_value_len)
        return [self._assemble_state(g, w) for g, w in zip(gates, words)]

    def predict_state(self, dialogue: Dialogue, turn: int) -> BeliefState:
        """Greedy prediction for one turn."""
        return self.predict_states([(dialogue, turn)])[0]

    # -- persistence -------------------------------------------------------

    def meta(self) -> dict:
        return {
            "vocab": self.vocab.content_tokens(),
            "ontology": [f"{d}-{s}" for d, s in self.ontology.domain_slots],
            "hidden_dim": self.hidden_dim,
            "embedding_dim": self.embedding_dim,
            "tagging": self.tagging,
            "lm_enabled": self.lm_enabled,
            "max_value_len": self.max_value_len,
        }

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.state_dict(), self.meta())

    @classmethod
    def load(cls, path) -> "DstModel":
        arrays, meta = ad.load_checkpoint(path)
        required = {"vocab", "ontology", "hidden_dim", "embedding_dim",
                    "tagging", "lm_enabled", "max_value_len"}
        if not required <= set(meta):
            raise ad.CheckpointError(f"checkpoint {path} missing metadata "
                                     f"{sorted(required - set(meta))}")
        vocab = Vocabulary(meta["vocab"])
        pairs = []
        for key in meta["ontology"]:
            domain, _, slot = key.partition("-")
            pairs.append((domain, slot))
        model = cls(vocab, Ontology(pairs),
                    hidden_dim=meta["hidden_dim"], embedding_dim=meta["embedding_dim"],
                    tagging=meta["tagging"], lm_enabled=meta["lm_enabled"],
                    max_value_len=meta["max_value_len"])
        model.store.load_state_dict(arrays)
        return model
