"""Context-aware review generation with C2S and gated C2S LSTM decoders.

Everything is plain numpy with hand-written backward passes::

    from ctxgen import ModelConfig, TrainConfig, Trainer
    from ctxgen.synthetic import context_selection_task

    task = context_selection_task()
    mc = ModelConfig("gc2s", len(task.vocab), hidden_size=32, context_cardinalities=(2, 3))
    trainer = Trainer.create(mc, TrainConfig(batch_size=10, initial_lr=0.1, max_epochs=30))
    trainer.fit(task.train, task.valid)
"""
__version__ = "0.1.0"

from .corpus import (BOS, EOS, PAD, UNK, Batch, ContextSchema, ContextType, Example, Vocabulary,
                     build_vocab, collate, load_examples, make_batches, split_dataset, tokenize)
from .errors import (CheckpointError, CheckpointVersionError, CorruptCheckpointError, CtxGenError,
                     DataError, FingerprintMismatchError, NumericError)
from .evaluation import (GateAttributionReport, NgramClassifier, PerplexityReport, ConfusionReport,
                         classify_corpus, gate_attribution, perplexity, train_ngram_classifier)
from .generation import (GeneratedText, SamplingConfig, beam_search, greedy_decode,
                         sample_sequence)
from .model import (GateTrace, LstmState, Model, ModelConfig, backward_sequence, encode_context,
                    forward_sequence, gate, loss_and_grad, lstm_step, output_distribution,
                    sequence_logprob)
from .numerics import (ParamStore, RngStreams, affine, clip_global_norm, grad_check,
                       sample_categorical, softmax_with_temperature)
from .training import (Checkpoint, EpochReport, Trainer, TrainConfig, init_params, load_checkpoint,
                       run_epoch, save_checkpoint, sgd_step, update_lr)
