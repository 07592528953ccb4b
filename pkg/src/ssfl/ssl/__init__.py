from .augment import AdditiveNoise, AugmentationPolicy, augment, augment_batch, make_generator
from .checkpoint import decode_archive, encode_archive, load_checkpoint, save_checkpoint
from .losses import (embedding_std, negative_cosine, nt_xent, simclr_loss, simsiam_forward,
                     simsiam_loss, symmetric_simsiam)
from .models import (ModelConfig, SiameseNet, build_model, desk_model_config, paper_model_config,
                     stub_model_config)
