"""Generate reviews for real contexts and try to tell them apart from the originals.

A small gC2S model is trained on toy reviews whose wording depends on rating
and product.  For every held-out review we sample one generated review with
the same rating and product, then train the unigram+bigram logistic
regression detector on half of the pairs and test it on the other half.
A sentiment classifier trained on real reviews is also run on the fakes,
to see whether the requested rating comes through.
"""
import os
import tempfile

from ctxgen import ModelConfig, SamplingConfig, Trainer, TrainConfig
from ctxgen.corpus import ContextSchema, build_vocab, encode_records, load_examples, split_dataset
from ctxgen.evaluation import classify_corpus, detection_experiment, train_ngram_classifier
from ctxgen.generation import sample_sequence
from ctxgen.numerics import RngStreams
from ctxgen.synthetic import toy_review_records, write_jsonl

path = os.path.join(tempfile.mkdtemp(), "reviews.jsonl")
write_jsonl(path, toy_review_records(1200, seed=0))
records = list(load_examples(path))
vocab = build_vocab(records, 20000)
schema = ContextSchema.infer(records, ["rating", "product"])
examples = encode_records(records, vocab, schema)
train, valid, test = split_dataset(examples, seed=0)
print(f"{len(train)} train / {len(valid)} valid / {len(test)} test reviews, {len(vocab)} tokens")

cfg = ModelConfig("gc2s", len(vocab), hidden_size=48, context_cardinalities=schema.cardinalities,
                  context_names=schema.names, dropout=0.2)
trainer = Trainer.create(cfg, TrainConfig(batch_size=32, initial_lr=0.5, max_epochs=6, dropout=0.2))
for rep in trainer.fit(train, valid):
    print(f"epoch {rep.epoch}  valid ppl {rep.valid_ppl:.2f}  lr {rep.lr:g}")

held = valid + test
rng = RngStreams(1)["sampling"]
sc = SamplingConfig(temperature=0.7, max_len=40)
real = [vocab.decode(list(e.tokens[1:])) for e in held]
fake = [sample_sequence(trainer.model, e.contexts, sc, rng, vocab).text for e in held]
for r, f in list(zip(real, fake))[:3]:
    print(f"\nreal: {r}\nfake: {f}")

_, rep = detection_experiment(real, fake, seed=0)
print("\nreal-vs-generated detector on held-out pairs (positive class: real)")
print(rep.table())

ratings = [schema.types[0].values[e.contexts[0]] for e in held]
sent = train_ngram_classifier(real, ratings, classes=list("12345"))
print("\nsentiment classifier trained on real reviews, applied to generated ones")
print(classify_corpus(sent, fake, ratings).table())
print(f"accuracy on generated reviews: {100 * classify_corpus(sent, fake, ratings).accuracy:.1f}%"
      f"  (chance 20%)")
