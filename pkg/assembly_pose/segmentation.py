"""Registry of segmentation providers the pipeline can call by name.

A provider takes a SceneRecord and returns a LabelImage of the same size.
"""

from typing import TYPE_CHECKING, Callable, Dict

from assembly_pose.raycast import LabelImage

if TYPE_CHECKING:
    from assembly_pose.dataset import SceneRecord

SegmentationProvider = Callable[["SceneRecord"], LabelImage]


class SegmentationRegistry:
    """Registry for managing segmentation providers."""

    def __init__(self):
        self._providers: Dict[str, SegmentationProvider] = {}

    def register(self, name: str) -> Callable[[SegmentationProvider], SegmentationProvider]:
        """
        Decorator to register a provider.

        Args:
            name: Unique identifier for the provider

        Returns:
            Decorator function
        """
        def decorator(func: SegmentationProvider) -> SegmentationProvider:
            self._providers[name] = func
            return func
        return decorator

    def get(self, name: str) -> SegmentationProvider:
        """
        Get a provider by name.

        Raises:
            ValueError: If the provider is not registered
        """
        provider = self._providers.get(name)
        if provider is None:
            raise ValueError(f"segmentation provider '{name}' not found; available: {', '.join(self.names())}")
        return provider

    def names(self) -> list[str]:
        """Get list of all registered provider names."""
        return sorted(self._providers)


# Global registry instance
segmentation_registry = SegmentationRegistry()


@segmentation_registry.register("ground_truth")
def ground_truth(record: "SceneRecord") -> LabelImage:
    """The record's rendered label image."""
    return record.labels
