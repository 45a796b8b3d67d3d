"""
Wire schema of the dataset / prediction JSON file.

Ground truth and predictions share one document shape; labels travel as
strings and are resolved to indices against the DatasetConfig on load.
"""

from typing import Annotated, List, Optional

from pydantic import BaseModel, ConfigDict, Field

BoxField = Annotated[List[float], Field(min_length=4, max_length=4)]
Probability = Annotated[float, Field(ge=0.0, le=1.0)]


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PartRecord(_Record):
    part: str
    box: BoxField
    state: str
    score: Optional[Probability] = None


class PersonRecord(_Record):
    box: BoxField
    score: Optional[Probability] = None
    action_scores: Optional[List[float]] = None
    parts: List[PartRecord] = []


class FrameRecord(_Record):
    idx: Annotated[int, Field(ge=0)]
    persons: List[PersonRecord] = []


class VideoRecord(_Record):
    video_id: str
    action: str
    width: Annotated[int, Field(gt=0)]
    height: Annotated[int, Field(gt=0)]
    action_scores: Optional[List[float]] = None
    frames: List[FrameRecord]


class ConfigRecord(_Record):
    actions: List[str]
    parts: List[str]
    states: List[str]


class DatasetDocument(_Record):
    config: Optional[ConfigRecord] = None
    videos: List[VideoRecord] = []
