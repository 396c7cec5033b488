"""somkit: Set-of-Mark tagging, listing-data generation, and list-wise evaluation.

The pipeline turns instance annotations into images with numbered tags,
builds "list items one by one" instruction-tuning records (rule-based or via
a vision LLM), probes corpora for listing-style text, scores predictions with
exact M/N accuracy, and mixes datasets deterministically.
"""

from .annotations import (
    AnnotationSet,
    BinaryMask,
    CategoryRecord,
    ImageRecord,
    SegmentationAnnotation,
    annotation_mask,
    decode_rle,
    encode_rle,
    load_annotation_file,
    mask_area,
    parse_annotation_file,
    rasterize_polygon,
)
from .errors import (
    AnnotationFormatError,
    ConfigError,
    DataError,
    ProtocolError,
    RecipeError,
    ReferentialError,
    SomkitError,
    TransportError,
)
from .listparse import ListingDetection, ParsedListing, detect_listing, parse_listing, probe_corpus
from .markalloc import (
    GranularityLevel,
    TagPlacement,
    TagStyle,
    TaggedImage,
    anchor_point,
    assign_tags,
    render_tags,
    resolve_overlaps,
    select_masks,
    tag_image,
)
from .scoring import ListingScore, MatchPolicy, aggregate_scores, score_file, score_listing
from .textgen import (
    ClientConfig,
    ConversationRecord,
    InstructionTemplate,
    ListingRecord,
    PromptBundle,
    VlmClient,
    build_listing_prompt,
    build_qa_prompt,
    format_listing,
    rule_based_listing,
    sample_template,
    to_conversation_record,
)
from .datamix import MixRecipe, MixSource, dataset_stats, mix

__version__ = "0.1.0"
