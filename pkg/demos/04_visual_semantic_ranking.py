"""Training the visual-semantic ranking network on a toy corpus.

The network embeds images and captions into one space with a hinge
ranking loss; after a short run each image sits closer to its own
caption than to any other caption in the set. The resulting cosine
similarity is the vision half of the sequence-training reward.
"""

import tempfile
from pathlib import Path

import numpy as np

from sgcap.autodiff import constant
from sgcap.features import build_vocabulary, load_bundle, load_dataset, load_word_vectors, tokenize
from sgcap.toydata import make_toy_data
from sgcap.vse import VseConfig, embed_caption, embed_image, train_vse, vision_reward

with tempfile.TemporaryDirectory() as tmp:
    info = make_toy_data(16, 27, seed=2, out_dir=Path(tmp))
    ds = load_dataset(info["dataset"])
    table = load_word_vectors(info["wordvecs"])
    records = ds.split("train")
    vocab = build_vocabulary((c for r in records for c in r.captions), min_count=1)
    # read the feature files while the directory still exists
    pairs = [
        (load_bundle(r, table).spatial,
         [vocab.token_to_id(t) for t in tokenize(r.captions[0])])
        for r in records
    ]
print(f"{len(pairs)} image/caption pairs, vocabulary of {len(vocab)} tokens")

config = VseConfig(vocab_size=len(vocab), spatial_dim=info["spatial_dim"],
                   embed_dim=16, hidden_dim=16, space_dim=16)
params, losses = train_vse(pairs, config, np.random.default_rng(0),
                           epochs=50, lr=0.02, batch_size=8)
print(f"hinge loss: {losses[0]:.3f} (epoch 0) -> {losses[-1]:.3f} (epoch {len(losses) - 1})")

# retrieval: for each image, rank every caption by cosine in the shared space
image_embs = [embed_image(params, constant(s)).data for s, _ in pairs]
caption_embs = [embed_caption(params, t).data for _, t in pairs]

correct = 0
margins = []
for i, img in enumerate(image_embs):
    scores = [vision_reward(c, img) for c in caption_embs]
    top = int(np.argmax(scores))
    if top == i:
        correct += 1
    runner_up = max(s for j, s in enumerate(scores) if j != i)
    margins.append(scores[i] - runner_up)

print(f"caption retrieval: {correct}/{len(pairs)} images rank their own caption first")
print(f"worst matched-minus-best-mismatch margin: {min(margins):+.3f}")
print("\nexample rewards for image 0:")
print(f"  own caption     {vision_reward(caption_embs[0], image_embs[0]):+.3f}")
print(f"  foreign caption {vision_reward(caption_embs[1], image_embs[0]):+.3f}")
