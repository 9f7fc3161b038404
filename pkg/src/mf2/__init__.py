"""Two-branch facial vision-language alignment with decoupled fine-tuning."""

from .data import AU_IDS, EMOTIONS, DatasetManifest, FaceSample, load_manifest, make_fixture_dataset, save_manifest
from .dfn import AdapterCell, DFNConfig, FreezeReport, attach_dfn, finetune_step, freeze_backbone
from .errors import MF2Error
from .model import FaceBatch, MF2Config, MF2Model, MF2Output, LossReport, load_checkpoint, save_checkpoint, total_loss
from .qformer import QFormer, QFormerConfig, itc_loss, itg_loss, itm_loss

__version__ = "0.1.0"
