"""Joint multimodal transformer for text and video event extraction."""

from .decode import beam_search, default_max_len, greedy_decode
from .model import JmmtConfig, JmmtModel, build_input, jmmt_loss, video_head_loss
from .train import JmmtTrainConfig, load_jmmt_model, predict, predict_documents, save_jmmt_model, train_jmmt
from .vocab import Vocabulary, build_text_vocab, build_vocab, deserialize_target, serialize_target

__all__ = [
    "JmmtConfig", "JmmtModel", "JmmtTrainConfig", "Vocabulary", "beam_search", "build_input", "build_text_vocab",
    "build_vocab", "default_max_len", "deserialize_target", "greedy_decode", "jmmt_loss", "load_jmmt_model",
    "predict", "predict_documents", "save_jmmt_model", "serialize_target", "train_jmmt", "video_head_loss",
]
