//! MS-COCO 2017 panoptic category table (80 thing and 53 stuff classes).

use crate::types::{Category, CategoryId, CategoryRegistry, Kind, Status};

pub const THING_CLASSES: [(u32, &str); 80] = [
    (1, "person"),
    (2, "bicycle"),
    (3, "car"),
    (4, "motorcycle"),
    (5, "airplane"),
    (6, "bus"),
    (7, "train"),
    (8, "truck"),
    (9, "boat"),
    (10, "traffic light"),
    (11, "fire hydrant"),
    (13, "stop sign"),
    (14, "parking meter"),
    (15, "bench"),
    (16, "bird"),
    (17, "cat"),
    (18, "dog"),
    (19, "horse"),
    (20, "sheep"),
    (21, "cow"),
    (22, "elephant"),
    (23, "bear"),
    (24, "zebra"),
    (25, "giraffe"),
    (27, "backpack"),
    (28, "umbrella"),
    (31, "handbag"),
    (32, "tie"),
    (33, "suitcase"),
    (34, "frisbee"),
    (35, "skis"),
    (36, "snowboard"),
    (37, "sports ball"),
    (38, "kite"),
    (39, "baseball bat"),
    (40, "baseball glove"),
    (41, "skateboard"),
    (42, "surfboard"),
    (43, "tennis racket"),
    (44, "bottle"),
    (46, "wine glass"),
    (47, "cup"),
    (48, "fork"),
    (49, "knife"),
    (50, "spoon"),
    (51, "bowl"),
    (52, "banana"),
    (53, "apple"),
    (54, "sandwich"),
    (55, "orange"),
    (56, "broccoli"),
    (57, "carrot"),
    (58, "hot dog"),
    (59, "pizza"),
    (60, "donut"),
    (61, "cake"),
    (62, "chair"),
    (63, "couch"),
    (64, "potted plant"),
    (65, "bed"),
    (67, "dining table"),
    (70, "toilet"),
    (72, "tv"),
    (73, "laptop"),
    (74, "mouse"),
    (75, "remote"),
    (76, "keyboard"),
    (77, "cell phone"),
    (78, "microwave"),
    (79, "oven"),
    (80, "toaster"),
    (81, "sink"),
    (82, "refrigerator"),
    (84, "book"),
    (85, "clock"),
    (86, "vase"),
    (87, "scissors"),
    (88, "teddy bear"),
    (89, "hair drier"),
    (90, "toothbrush"),
];

pub const STUFF_CLASSES: [(u32, &str); 53] = [
    (92, "banner"),
    (93, "blanket"),
    (95, "bridge"),
    (100, "cardboard"),
    (107, "counter"),
    (109, "curtain"),
    (112, "door-stuff"),
    (118, "floor-wood"),
    (119, "flower"),
    (122, "fruit"),
    (125, "gravel"),
    (128, "house"),
    (130, "light"),
    (133, "mirror-stuff"),
    (138, "net"),
    (141, "pillow"),
    (144, "platform"),
    (145, "playingfield"),
    (147, "railroad"),
    (148, "river"),
    (149, "road"),
    (151, "roof"),
    (154, "sand"),
    (155, "sea"),
    (156, "shelf"),
    (159, "snow"),
    (161, "stairs"),
    (166, "tent"),
    (168, "towel"),
    (171, "wall-brick"),
    (175, "wall-stone"),
    (176, "wall-tile"),
    (177, "wall-wood"),
    (178, "water-other"),
    (180, "window-blind"),
    (181, "window-other"),
    (184, "tree-merged"),
    (185, "fence-merged"),
    (186, "ceiling-merged"),
    (187, "sky-other-merged"),
    (188, "cabinet-merged"),
    (189, "table-merged"),
    (190, "floor-other-merged"),
    (191, "pavement-merged"),
    (192, "mountain-merged"),
    (193, "grass-merged"),
    (194, "dirt-merged"),
    (195, "paper-merged"),
    (196, "food-other-merged"),
    (197, "building-other-merged"),
    (198, "rock-merged"),
    (199, "wall-other-merged"),
    (200, "rug-merged"),
];

/// The full COCO panoptic registry with every category known.
pub fn coco_registry() -> CategoryRegistry {
    let things = THING_CLASSES.iter().map(|&(id, name)| Category {
        id: CategoryId(id),
        name: name.to_string(),
        kind: Kind::Thing,
        status: Status::Known,
    });
    let stuff = STUFF_CLASSES.iter().map(|&(id, name)| Category {
        id: CategoryId(id),
        name: name.to_string(),
        kind: Kind::Stuff,
        status: Status::Known,
    });
    CategoryRegistry::new(things.chain(stuff).collect()).expect("static COCO table is valid")
}

/// Looks up a thing class id by its COCO name.
pub fn thing_id(name: &str) -> Option<CategoryId> {
    THING_CLASSES
        .iter()
        .find(|&&(_, n)| n == name)
        .map(|&(id, _)| CategoryId(id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        let reg = coco_registry();
        assert_eq!(reg.things().count(), 80);
        assert_eq!(reg.stuff().count(), 53);
        assert_eq!(thing_id("bear"), Some(CategoryId(23)));
        assert_eq!(thing_id("teddy bear"), Some(CategoryId(88)));
    }
}
