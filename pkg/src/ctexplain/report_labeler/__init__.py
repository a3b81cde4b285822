from .labeler import (
    ABNORMAL,
    NORMAL,
    LocationAbnormalityLabels,
    classify_phrases,
    label_report,
    labels_from_json,
    labels_from_pairs,
    read_labels_json,
    read_reports_csv,
    term_search_abnormalities,
    term_search_locations,
    write_labels_json,
    write_reports_csv,
)
from .vocab import Vocabulary, default_vocabulary
