/* tslint:disable */
/* eslint-disable */

/**
 * Anchors for an image, five values each: the box and an inside flag
 * (1 inside, 0 crossing the border).
 */
export function anchor_grid(width: number, height: number, stride: number, base_size: number, scales: Float64Array, ratios: Float64Array): Float64Array;

export function box_iou(a: Float64Array, b: Float64Array): number;

/**
 * Indices of the boxes kept by greedy NMS, highest score first. Input is
 * five values per box, the last one the score.
 */
export function nms_keep(boxes: Float64Array, iou_threshold: number): Uint32Array;

/**
 * Feature cells covered by a box, `[x0, y0, x1, y1]` with exclusive ends.
 */
export function roi_cells(b: Float64Array, stride: number, fmap_w: number, fmap_h: number): Uint32Array;

/**
 * Max-pools the region under `b` of a single-channel `fmap_h × fmap_w`
 * feature map to `out_h × out_w`.
 */
export function roi_pool_single(feature: Float64Array, fmap_w: number, fmap_h: number, b: Float64Array, stride: number, out_w: number, out_h: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly anchor_grid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly box_iou: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly nms_keep: (a: number, b: number, c: number) => [number, number, number, number];
    readonly roi_cells: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly roi_pool_single: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
