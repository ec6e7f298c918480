#!/usr/bin/env python3
"""Regenerates tests/fixtures/tiny_llama: a randomly initialised Llama-architecture model,
a SentencePiece-style BPE tokenizer.json, and reference outputs computed with PyTorch and
the `tokenizers` library. The C++ backend is checked against reference.json."""

import json
import os
import sys

import torch
from tokenizers import Tokenizer, decoders, models, normalizers, trainers
from transformers import LlamaConfig, LlamaForCausalLM

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)
OUT = os.path.join(ROOT, "tests", "fixtures", "tiny_llama")

SYSTEM = ("A chat between a human and an artificial intelligence assistant. The assistant provides "
          "a numbered list of product recommendations ranked based on the user's request.")
QUERY = "I am looking for an affordable coffee machine. Can I get some recommendations?"


def build_tokenizer(corpus):
    specials = ["<unk>", "<s>", "</s>"]
    byte_tokens = [f"<0x{b:02X}>" for b in range(256)]

    tok = Tokenizer(models.BPE(unk_token="<unk>", byte_fallback=True, fuse_unk=True))
    tok.normalizer = normalizers.Sequence([normalizers.Prepend("▁"), normalizers.Replace(" ", "▁")])
    trainer = trainers.BpeTrainer(vocab_size=420, special_tokens=specials, show_progress=False)
    tok.train_from_iterator(corpus, trainer=trainer)

    trained = json.loads(tok.to_str())
    old_vocab = trained["model"]["vocab"]
    vocab = {}
    for s in specials + byte_tokens:
        vocab[s] = len(vocab)
    for piece, _ in sorted(old_vocab.items(), key=lambda kv: kv[1]):
        if piece not in vocab:
            vocab[piece] = len(vocab)
    trained["model"]["vocab"] = vocab
    trained["added_tokens"] = [
        {"id": vocab[s], "content": s, "single_word": False, "lstrip": False, "rstrip": False,
         "normalized": False, "special": True}
        for s in specials
    ]
    trained["decoder"] = json.loads(Tokenizer(models.BPE()).to_str())["decoder"]
    final = Tokenizer.from_str(json.dumps(trained))
    final.decoder = decoders.Sequence([decoders.Replace("▁", " "), decoders.ByteFallback(),
                                       decoders.Fuse(), decoders.Strip(" ", 1, 0)])
    return final


def render_prompt(lines):
    return ("<s>[INST] <<SYS>>\n" + SYSTEM + "\n<</SYS>>\n\nProducts:\n\n" + "\n\n".join(lines) +
            "\n\n" + QUERY + " [/INST]")


def main():
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(ROOT, "data", "coffee_machines.jsonl"), encoding="utf-8") as f:
        lines = [l.rstrip("\n") for l in f if l.strip()]
    prompt = render_prompt(lines)
    corpus = lines + [SYSTEM, QUERY, "1. ColdBrew Master", "[INST] <<SYS>> <</SYS>> [/INST]"] * 3

    tok = build_tokenizer(corpus)
    tok.save(os.path.join(OUT, "tokenizer.json"))
    vocab_size = tok.get_vocab_size()

    torch.manual_seed(1234)
    cfg = LlamaConfig(vocab_size=vocab_size, hidden_size=32, intermediate_size=48, num_hidden_layers=2,
                      num_attention_heads=4, num_key_value_heads=2, max_position_embeddings=2048,
                      rms_norm_eps=1e-5, tie_word_embeddings=False, bos_token_id=1, eos_token_id=2,
                      initializer_range=0.2)
    model = LlamaForCausalLM(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
    model = model.to(torch.float32).eval()
    model.save_pretrained(OUT, safe_serialization=True)

    encode_cases = [
        "1. ColdBrew Master",
        "*",
        "",
        "café ☕ naïve",
        "<s>[INST] hi [/INST]",
        "  double  spaces\n\tand a newline",
        'He said "quoted" \\ backslash',
        prompt,
    ]
    encodings = []
    for text in encode_cases:
        ids = tok.encode(text, add_special_tokens=False).ids
        encodings.append({"text": text, "ids": ids, "decoded": tok.decode(ids, skip_special_tokens=False)})

    # Forward/backward reference in float64.
    model64 = LlamaForCausalLM(cfg)
    model64.load_state_dict(model.state_dict())
    model64 = model64.to(torch.float64).eval()

    text = "<s>[INST] Products: ColdBrew Master, QuickBrew Express. Pick one. [/INST]"
    ids = tok.encode(text, add_special_tokens=False).ids
    target = tok.encode("1. ColdBrew Master", add_special_tokens=False).ids
    full = ids + target
    sts_begin, sts_end = 4, 10
    tgt_begin, tgt_end = len(ids), len(full)

    emb = model64.get_input_embeddings().weight
    x = emb[torch.tensor(full)].detach().clone().requires_grad_(True)
    out = model64(inputs_embeds=x.unsqueeze(0))
    logits = out.logits[0]
    lp = torch.log_softmax(logits[tgt_begin - 1:tgt_end - 1], dim=-1)
    loss = -lp[torch.arange(len(target)), torch.tensor(target)].mean()
    loss.backward()
    one_hot_grad = x.grad[sts_begin:sts_end] @ emb.detach().T

    reference = {
        "vocab_size": vocab_size,
        "encodings": encodings,
        "forward": {
            "tokens": full,
            "logits": logits.detach().tolist(),
            "sts_slice": [sts_begin, sts_end],
            "target_slice": [tgt_begin, tgt_end],
            "loss": loss.item(),
            "one_hot_grad": one_hot_grad.tolist(),
        },
    }
    with open(os.path.join(OUT, "reference.json"), "w", encoding="utf-8") as f:
        json.dump(reference, f)
    for extra in ("generation_config.json",):
        path = os.path.join(OUT, extra)
        if os.path.exists(path):
            os.remove(path)
    print(f"wrote {OUT} (vocab {vocab_size}, loss {loss.item():.6f})", file=sys.stderr)


if __name__ == "__main__":
    main()
