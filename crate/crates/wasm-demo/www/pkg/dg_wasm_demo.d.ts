/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    audio_channels(): number;
    clip_length(): number;
    /**
     * The clip as a `channels x length` magnitude strip, low channels at
     * the bottom. The splice mask tints padding and spliced audio red.
     */
    clip_rgba(): Uint8Array;
    /**
     * Draws a new pair; `language` picks the regime. Returns one line per
     * object: class and event window in samples.
     */
    generate(language: boolean, seed: bigint): string[];
    heads(): number;
    /**
     * The image, contrast-stretched per channel.
     */
    image_rgba(): Uint8Array;
    image_size(): number;
    /**
     * Replaces the weights with those of a `.dgck` file.
     */
    load_checkpoint(bytes: Uint8Array): string;
    /**
     * Heatmap for object `index`. A language object is queried with its own
     * event window of the paired clip, a sound object with a clean prompt of
     * its class. `head` selects one head; a negative value pools over all.
     */
    localize(index: number, head: number): Localization;
    /**
     * Ground-truth mask of object `index`, as an overlay.
     */
    mask_rgba(index: number): Uint8Array;
    /**
     * Where the current weights came from.
     */
    model_source(): string;
    /**
     * Default generator with an untrained model until a checkpoint is loaded.
     */
    constructor();
}

/**
 * Result of one localization query.
 */
export class Localization {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Average precision of the heatmap against the object's mask.
     */
    ap(): number;
    /**
     * Feature frames the audio side was averaged over.
     */
    frames(): string;
    /**
     * IoU of the min-max scaled heatmap thresholded at 0.5.
     */
    iou(): number;
    /**
     * Heatmap over the image, image-sized RGBA.
     */
    rgba(): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_localization_free: (a: number, b: number) => void;
    readonly demo_audio_channels: (a: number) => number;
    readonly demo_clip_length: (a: number) => number;
    readonly demo_clip_rgba: (a: number) => [number, number, number, number];
    readonly demo_generate: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_heads: (a: number) => number;
    readonly demo_image_rgba: (a: number) => [number, number, number, number];
    readonly demo_image_size: (a: number) => number;
    readonly demo_load_checkpoint: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_localize: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_mask_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_model_source: (a: number) => [number, number];
    readonly demo_new: () => number;
    readonly localization_ap: (a: number) => number;
    readonly localization_frames: (a: number) => [number, number];
    readonly localization_iou: (a: number) => number;
    readonly localization_rgba: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
