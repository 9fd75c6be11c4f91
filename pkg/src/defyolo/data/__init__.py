from .formats import (FORMATS, AnnotationError, AnnotationSet, BoxAnnotation, ImageInfo, parse_coco,
                      parse_voc, parse_yolo, read_annotations, write_annotations, write_coco, write_voc,
                      write_yolo)
from .synth import SynthDataset, SynthScene, SynthSceneConfig, synth_dataset, write_dataset
from .transforms import PAD_VALUE, hflip, intensity_jitter, letterbox, read_gray, to_model_input, write_gray
