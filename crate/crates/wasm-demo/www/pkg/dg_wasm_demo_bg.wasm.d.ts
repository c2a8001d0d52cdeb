/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_localization_free: (a: number, b: number) => void;
export const demo_audio_channels: (a: number) => number;
export const demo_clip_length: (a: number) => number;
export const demo_clip_rgba: (a: number) => [number, number, number, number];
export const demo_generate: (a: number, b: number, c: bigint) => [number, number, number, number];
export const demo_heads: (a: number) => number;
export const demo_image_rgba: (a: number) => [number, number, number, number];
export const demo_image_size: (a: number) => number;
export const demo_load_checkpoint: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_localize: (a: number, b: number, c: number) => [number, number, number];
export const demo_mask_rgba: (a: number, b: number) => [number, number, number, number];
export const demo_model_source: (a: number) => [number, number];
export const demo_new: () => number;
export const localization_ap: (a: number) => number;
export const localization_frames: (a: number) => [number, number];
export const localization_iou: (a: number) => number;
export const localization_rgba: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
